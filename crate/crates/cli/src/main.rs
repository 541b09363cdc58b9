//! `disentangle`: synthesize benchmarks, train and evaluate causal feature
//! masks over `EMB1` embedding files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use disentangle::ablation::{ablate, ablation_table, ordering_holds, MASKING_ONLY_NOTE};
use disentangle::checkpoint;
use disentangle::config::RunConfig;
use disentangle::emb::{read_emb, read_emb_file, write_atomic, write_emb};
use disentangle::gradcheck::{run_suite, SUITE_TOLERANCE};
use disentangle::mask::mask_sparsity;
use disentangle::metrics::{mask_recovery, DEFAULT_THRESHOLD};
use disentangle::report::{evaluate_dataset, MetricsReport};
use disentangle::synthgen::make_benchmark_with;
use disentangle::trainer::{Trainer, Variant};

#[derive(Parser)]
#[command(name = "disentangle", version, about = "Learned causal feature masks over embedding vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark as EMB1 files.
    Synth(SynthArgs),
    /// Train on EMB1 train/val files; writes a checkpoint and the history.
    Train(TrainArgs),
    /// Score a checkpoint on one or more EMB1 files.
    Eval(EvalArgs),
    /// Print the per-dimension mean mask of a checkpoint over a file.
    Inspect(InspectArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train the four module configurations and compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => Ok(RunConfig::load(p)?),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Directory for `checkpoint.ckpt` and `history.toml`.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    test: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Directory for `report.toml`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embeddings to average the mask over; its truth mask, if any, is used
    /// for recovery metrics.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `ablation.toml`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let bench = make_benchmark_with(&cfg.synth, args.seed)?;
    create_dir(&args.out)?;
    for (name, batch) in bench.splits() {
        let path = args.out.join(format!("{name}.emb"));
        write_emb(&path, batch)?;
        println!("wrote {} ({} x {})", path.display(), batch.len(), batch.dim());
    }
    let spec = toml::to_string(&bench.spec).context("serialising spec")?;
    write_atomic(&args.out.join("spec.toml"), spec.as_bytes())?;
    println!("causal dims: {:?}", bench.spec.causal_dims);
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let train = read_emb(&args.train).with_context(|| format!("reading {}", args.train.display()))?;
    let val = read_emb(&args.val).with_context(|| format!("reading {}", args.val.display()))?;
    let mut trainer = match &args.checkpoint {
        Some(p) => checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let mut cfg = args.config.load()?.train;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            Trainer::new(train.dim(), cfg)?
        }
    };
    create_dir(&args.out)?;
    let ckpt = args.out.join("checkpoint.ckpt");
    while !trainer.is_finished() {
        let r = trainer.run_epoch(&train, &val)?;
        println!(
            "epoch {:>3}  tau {:.3}  train {:.5}  val {:.5}  acc {:.4}  adv {:.4}  hsic {:.2e}  sparsity {:.2}",
            r.epoch,
            r.temperature,
            r.train.total,
            r.validation.total,
            r.classifier_accuracy,
            r.adversary_accuracy,
            r.hsic,
            r.mask_sparsity
        );
        checkpoint::save(&ckpt, &trainer)?;
    }
    checkpoint::save(&ckpt, &trainer)?;
    let history = toml::to_string(trainer.history()).context("serialising history")?;
    write_atomic(&args.out.join("history.toml"), history.as_bytes())?;
    match trainer.history().best() {
        Some(b) => println!(
            "best epoch {} (val loss {:.5}, val accuracy {:.4}){}",
            b.epoch,
            b.validation.total,
            b.classifier_accuracy,
            if trainer.history().stopped_early { ", stopped early" } else { "" }
        ),
        None => println!("no epochs run"),
    }
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let trainer = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let bundle = trainer.best_bundle();
    // Files are independent; score them concurrently against the shared bundle.
    let rows = thread::scope(|s| {
        let handles: Vec<_> = args
            .test
            .iter()
            .map(|path| {
                s.spawn(move || -> Result<_> {
                    let data = read_emb(path).with_context(|| format!("reading {}", path.display()))?;
                    Ok(evaluate_dataset(bundle, &stem(path), &data, args.threshold)?)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut report = MetricsReport::new(rows, args.threshold)?;
    report.seed = Some(trainer.config.seed);
    report.config = Some(trainer.config.clone());
    if trainer.config.variant == Variant::MaskingOnly {
        report.notes.push(MASKING_ONLY_NOTE.into());
    }
    print!("{}", report.to_table());
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let path = dir.join("report.toml");
        write_atomic(&path, report.to_toml()?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let trainer = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let bundle = trainer.best_bundle();
    let file = read_emb_file(&args.test).with_context(|| format!("reading {}", args.test.display()))?;
    let mask = bundle.deterministic_mask(&file.embeddings)?;
    let means = mask.column_means();
    println!(
        "checkpoint: epoch {}, {} steps, variant {}",
        trainer.epoch(),
        trainer.steps(),
        trainer.config.variant.name()
    );
    let truth = file.ground_truth.as_deref();
    println!("{:>4}  {:>7}  {}", "dim", "mask", if truth.is_some() { "causal" } else { "" });
    for (i, m) in means.iter().enumerate() {
        let mark = match truth {
            Some(t) if t.contains(&i) => "  *",
            _ => "",
        };
        println!("{i:>4}  {m:>7.4}{mark}");
    }
    println!("mean sparsity (L1 per row): {:.4}", mask_sparsity(&mask));
    let selected: Vec<usize> = (0..means.len()).filter(|&i| means[i] >= args.threshold).collect();
    println!("selected at {}: {:?}", args.threshold, selected);
    if let Some(t) = truth {
        let r = mask_recovery(&means, t, args.threshold)?;
        println!(
            "recovery: precision {:.4}  recall {:.4}  IoU {:.4}{}",
            r.precision,
            r.recall,
            r.iou,
            if r.vacuous { "  (empty truth set)" } else { "" }
        );
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let report = run_suite(args.seed)?;
    for c in &report.cases {
        println!(
            "{:<26} n={:<3} d={:<3} params={:<5} max rel err {:.3e}  {}",
            c.name,
            c.n,
            c.d,
            c.params,
            c.max_relative_error,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = report.cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed (tolerance {SUITE_TOLERANCE:e}): {}", failed.join(", "));
    }
    println!("all {} cases within {SUITE_TOLERANCE:e}", report.cases.len());
    Ok(())
}

fn ablate_cmd(args: &AblateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let bench = make_benchmark_with(&cfg.synth, args.seed)?;
    let base = disentangle::trainer::TrainConfig {
        seed: args.seed,
        ..cfg.train
    };
    let rows = ablate(&bench, &base)?;
    print!("{}", ablation_table(&rows));
    println!(
        "full strictly best and both single modules above both_off: {}",
        if ordering_holds(&rows) { "yes" } else { "no" }
    );
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        #[derive(serde::Serialize)]
        struct Out<'a> {
            note: &'a str,
            seed: u64,
            rows: &'a [disentangle::ablation::AblationRow],
        }
        let text = toml::to_string(&Out {
            note: MASKING_ONLY_NOTE,
            seed: args.seed,
            rows: &rows,
        })
        .context("serialising ablation")?;
        let path = dir.join("ablation.toml");
        write_atomic(&path, text.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
