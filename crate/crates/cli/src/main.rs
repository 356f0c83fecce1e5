use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use hypercol::config::RunConfig;
use hypercol::data::{generate_synthetic, load_manifest, Dataset, ImageSet, Sample};
use hypercol::experiment::{initial_state, prepare, run_seed, summary_csv, Prepared};
use hypercol::saliency::{bbox_saliency_fraction, saliency_map, write_saliency_pgm, SaliencyTarget, TargetClass};
use hypercol::train::{evaluate, load_checkpoint, metrics_csv, save_checkpoint, Checkpoint, EpochMetrics, TrainState};
use hypercol::verify::{run_all, VerifyConfig};

#[derive(Parser)]
#[command(name = "hypercol", version, about = "Hypercolumn vs. global-pool classifiers on class x context data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model per seed on a leave-N-contexts-out split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seed list, overriding run.seeds.
        #[arg(long, alias = "seed")]
        seeds: Option<String>,
        #[arg(long)]
        n_holdout: Option<usize>,
        #[arg(long)]
        model: Option<Kind>,
        #[arg(long)]
        force: bool,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Accuracy of a checkpoint on the split it was trained with.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitSide,
    },
    /// Write input-gradient saliency maps as PGM images.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A single PPM image.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        image: Option<PathBuf>,
        /// Take held-out images of the checkpoint's split from this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        target: Option<Target>,
        /// Number of manifest images, overriding saliency.images.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Run the built-in gradient, oracle and format checks.
    #[command(alias = "gradcheck")]
    Verify {
        /// Random instances per op.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Baseline,
    Hypercolumn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Logit,
    Loss,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum SplitSide {
    Test,
    Train,
}

enum Failure {
    /// Exit code 2.
    Usage(String),
    /// Exit code 1.
    Failed(String),
}

impl From<hypercol::Error> for Failure {
    fn from(e: hypercol::Error) -> Self {
        match e {
            hypercol::Error::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Failed(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, force } => gen_data(config.as_deref(), &out, force),
        Command::Train { config, manifest, out, seeds, n_holdout, model, force, resume } => {
            let overrides = Overrides { seeds, n_holdout, model };
            train(config.as_deref(), &manifest, &out, overrides, force, resume)
        }
        Command::Eval { checkpoint, manifest, split } => eval(&checkpoint, &manifest, split),
        Command::Saliency { checkpoint, image, manifest, out, target, count, force } => {
            saliency(&checkpoint, image.as_deref(), manifest.as_deref(), &out, target, count, force)
        }
        Command::Verify { seeds } => verify(seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn read_config(path: Option<&Path>) -> CliResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> CliResult {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Failure::Failed(format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| Failure::Failed(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| Failure::Failed(format!("{}: {e}", path.display())))
}

fn gen_data(config: Option<&Path>, out: &Path, force: bool) -> CliResult {
    let cfg = read_config(config)?;
    prepare_out_dir(out, force)?;
    let manifest = generate_synthetic(&cfg.data, out)?;
    let d = &cfg.data;
    println!(
        "generated {} images: {} classes x {} contexts x {} per context, {}x{}",
        d.num_images(),
        d.num_classes,
        d.contexts_per_class,
        d.images_per_context,
        d.image_size.0,
        d.image_size.1
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}

struct Overrides {
    seeds: Option<String>,
    n_holdout: Option<usize>,
    model: Option<Kind>,
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) -> CliResult {
    let mut set = |flag: &str, key: &str, value: String| {
        cfg.set(key, &value).map_err(|msg| Failure::Usage(format!("--{flag}: {msg}")))
    };
    if let Some(seeds) = &o.seeds {
        set("seeds", "run.seeds", seeds.clone())?;
    }
    if let Some(n) = o.n_holdout {
        set("n-holdout", "split.holdout", n.to_string())?;
    }
    if let Some(kind) = o.model {
        let name = match kind {
            Kind::Baseline => "baseline",
            Kind::Hypercolumn => "hypercolumn",
        };
        set("model", "model.kind", name.to_string())?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))
}

/// Metrics rows already on disk for epochs up to `epoch`.
fn previous_metrics(path: &Path, epoch: usize) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e <= epoch))
        .map(str::to_string)
        .collect()
}

fn train(config: Option<&Path>, manifest: &Path, out: &Path, overrides: Overrides, force: bool, resume: bool) -> CliResult {
    let mut cfg = read_config(config)?;
    apply_overrides(&mut cfg, &overrides)?;
    if !resume {
        prepare_out_dir(out, force)?;
    }
    fs::create_dir_all(out).map_err(|e| Failure::Failed(format!("{}: {e}", out.display())))?;
    let ds = load_manifest(manifest)?;
    write(&out.join("config.txt"), cfg.to_text())?;
    println!("{} samples, {} classes; model {} ; holdout {} contexts per class", ds.len(), ds.num_classes(), cfg.kind, cfg.holdout);

    let mut finals = Vec::new();
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let run_cfg = cfg.for_seed(seed);
        let blob = run_cfg.to_text();
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(|e| Failure::Failed(format!("{}: {e}", dir.display())))?;
        write(&dir.join("config.txt"), &blob)?;
        let ckpt_path = dir.join("checkpoint.bin");
        let metrics_path = dir.join("metrics.csv");

        let prepared = prepare(&run_cfg, &ds, run_cfg.split_seed_for(seed), run_cfg.holdout)?;
        let (state, mut rows) = if resume && ckpt_path.exists() {
            let ckpt = load_checkpoint(&ckpt_path)?;
            let saved = RunConfig::parse(&ckpt.config)?;
            if saved.model_config() != run_cfg.model_config() || saved.holdout != run_cfg.holdout || saved.split_seed != run_cfg.split_seed {
                return Err(Failure::Failed(format!("{}: checkpoint was trained with a different configuration", ckpt_path.display())));
            }
            let state = ckpt.to_state(&run_cfg.model_config())?;
            println!("seed {seed}: resuming after epoch {}", state.epoch);
            let rows = previous_metrics(&metrics_path, state.epoch);
            (state, rows)
        } else {
            (initial_state(&run_cfg, seed, &prepared)?, Vec::new())
        };
        println!(
            "seed {seed}: {} train / {} test images, {} parameters",
            prepared.train.len(),
            prepared.test.len(),
            state.model.num_parameters()
        );

        let on_epoch = |m: &EpochMetrics, s: &TrainState| -> hypercol::Result<()> {
            let test = m.test.map_or_else(String::new, |t| format!(" test_loss={:.4} test_acc={:.4}", t.loss, t.accuracy));
            println!(
                "seed {seed} epoch {:>3} lr={} train_loss={:.4} train_acc={:.4}{test} ({:.0}s)",
                m.epoch,
                m.lr,
                m.train.loss,
                m.train.accuracy,
                started.elapsed().as_secs_f64()
            );
            save_checkpoint(&Checkpoint::from_state(s, &blob), &ckpt_path)?;
            rows.extend(metrics_csv(std::slice::from_ref(m)).lines().skip(1).map(str::to_string));
            let text = std::iter::once("epoch,split,loss,accuracy".to_string()).chain(rows.iter().cloned()).collect::<Vec<_>>().join("\n");
            fs::write(&metrics_path, text + "\n").map_err(|e| hypercol::Error::Io { path: metrics_path.clone(), source: e })
        };
        let run = run_seed(&run_cfg, &prepared, state, on_epoch)?;
        if run.metrics.is_empty() {
            save_checkpoint(&Checkpoint::from_state(&run.state, &blob), &ckpt_path)?;
        }
        let test = run.final_test.map(|t| t.accuracy);
        println!(
            "seed {seed}: final train_acc(eval)={:.4} test_acc={}",
            run.final_train.accuracy,
            test.map_or_else(|| "n/a".into(), |t| format!("{t:.4}"))
        );
        finals.push((seed, run.final_train.accuracy, test));
    }
    let summary = summary_csv(cfg.kind, &finals);
    write(&out.join("summary.csv"), &summary)?;
    for line in summary.lines().filter(|l| l.contains(",mean,") || l.contains(",std,")) {
        println!("{line}");
    }
    Ok(())
}

/// Restores a checkpoint together with the run configuration stored in it.
fn restore(path: &Path) -> CliResult<(RunConfig, TrainState)> {
    let ckpt = load_checkpoint(path)?;
    let cfg = RunConfig::parse(&ckpt.config)
        .map_err(|e| Failure::Failed(format!("{}: stored configuration is invalid: {e}", path.display())))?;
    let state = ckpt
        .to_state(&cfg.model_config())
        .map_err(|e| Failure::Failed(format!("{}: checkpoint does not match its configuration: {e}", path.display())))?;
    Ok((cfg, state))
}

fn prepared_for(cfg: &RunConfig, state: &TrainState, ds: &Dataset) -> CliResult<Prepared> {
    Ok(prepare(cfg, ds, state.split_seed, state.holdout)?)
}

fn eval(checkpoint: &Path, manifest: &Path, side: SplitSide) -> CliResult {
    let (cfg, state) = restore(checkpoint)?;
    let ds = load_manifest(manifest)?;
    let prepared = prepared_for(&cfg, &state, &ds)?;
    let set = if side == SplitSide::Test { &prepared.test } else { &prepared.train };
    let e = evaluate(&state.model, set, &state.normalization, cfg.train.batch_size)?;
    let name = if side == SplitSide::Test { "test" } else { "train" };
    println!(
        "model={} epoch={} split_seed={} holdout={} split={name} samples={} loss={} accuracy={}",
        cfg.kind,
        state.epoch,
        state.split_seed,
        state.holdout,
        set.len(),
        e.loss,
        e.accuracy
    );
    Ok(())
}

fn saliency(
    checkpoint: &Path,
    image: Option<&Path>,
    manifest: Option<&Path>,
    out: &Path,
    target: Option<Target>,
    count: Option<usize>,
    force: bool,
) -> CliResult {
    let (cfg, state) = restore(checkpoint)?;
    let target = match target {
        Some(Target::Logit) => SaliencyTarget::Logit,
        Some(Target::Loss) => SaliencyTarget::Loss,
        None => cfg.saliency_target,
    };
    let (ds, indices) = match (image, manifest) {
        (Some(path), _) => {
            let sample = Sample { path: path.to_path_buf(), class: 0, context: 0, bbox: None };
            (Dataset { samples: vec![sample], class_names: vec![String::new()], context_names: vec![vec![String::new()]] }, vec![0])
        }
        (None, Some(m)) => {
            let ds = load_manifest(m)?;
            let prepared = prepared_for(&cfg, &state, &ds)?;
            let n = count.unwrap_or(cfg.saliency_images);
            let picked: Vec<usize> = prepared.split.test_indices(&ds).into_iter().take(n).collect();
            (ds, picked)
        }
        (None, None) => return Err(Failure::Usage("one of --image or --manifest is required".into())),
    };
    prepare_out_dir(out, force)?;
    let set = ImageSet::load(&ds, &indices)?;
    let mut fractions = Vec::new();
    for pos in 0..set.len() {
        let sample = &ds.samples[indices[pos]];
        let x = set.tensor(&[pos], &state.normalization)?;
        let map = saliency_map(&state.model, &x, TargetClass::Predicted, target)?;
        let stem = sample.path.file_stem().map_or_else(|| format!("image{pos}"), |s| s.to_string_lossy().into_owned());
        write_saliency_pgm(&map, &out.join(format!("{stem}.pgm")))?;
        if let Some(b) = sample.bbox {
            fractions.push(format!("{},{}", sample.path.display(), bbox_saliency_fraction(&map, b)?));
        }
    }
    println!("wrote {} saliency maps ({target} target) to {}", set.len(), out.display());
    if !fractions.is_empty() && fractions.len() == set.len() {
        let mean = fractions.iter().filter_map(|l| l.rsplit(',').next()?.parse::<f64>().ok()).sum::<f64>() / fractions.len() as f64;
        write(&out.join("fractions.csv"), format!("image,fraction\n{}\n", fractions.join("\n")))?;
        println!("mean bbox saliency fraction: {mean:.4}");
    }
    Ok(())
}

fn verify(seeds: u64) -> CliResult {
    let cfg = VerifyConfig { seeds, ..Default::default() };
    let started = Instant::now();
    let reports = run_all(&cfg, |r| println!("{r}"));
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed, {:.1}s", reports.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::Failed(format!("{failed} verification checks failed")));
    }
    Ok(())
}
