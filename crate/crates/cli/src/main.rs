//! Command-line driver for the two-stage point-cloud pipeline: contrastive
//! pretraining, frozen-encoder downstream training, evaluation, gradient
//! checks, synthetic data generation, and the two ablation studies.

use std::error::Error;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcdu_core::checkpoint::Checkpoint;
use pcdu_core::config::{RunConfig, Task};
use pcdu_core::data::{gen_synthetic, load_dataset, save_dataset, Dataset, SynthSpec};
use pcdu_core::encoders::EncoderConfig;
use pcdu_core::metrics::MetricsReport;
use pcdu_core::train::{
    ablate_augment, ablate_labels, encoder_gradient_report, evaluate, head_gradient_report,
    pretrain, resolve_splits, train_downstream, DownstreamSpec, EpochRecord, PipelineSpec,
    PretrainSpec,
};

/// Downstream head widths; the final two-class output layer is appended by
/// the head itself.
const CLS_HEAD_HIDDEN: &[usize] = &[512, 256, 128];
const SEG_HEAD_HIDDEN: &[usize] = &[1024, 512, 256];
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "pcdu",
    version,
    about = "Dual-branch contrastive representation learning for 3D point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderScale {
    /// Full-size dual encoders matched to the point budget.
    Standard,
    /// Reduced-width configuration for smoke runs on desk-scale data.
    Tiny,
}

#[derive(Args)]
struct RunOpts {
    /// Task to run: cls | seg (must agree with the config file when both are given)
    #[arg(long)]
    task: Option<Task>,
    /// Point sampling budget per cloud: 512 | 1024 | 2048
    #[arg(long, value_parser = parse_points)]
    points: Option<usize>,
    /// Config file of `key = value` lines; omitted keys keep task defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; also drives the dataset split
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch count override
    #[arg(long)]
    epochs: Option<usize>,
    /// Encoder scale
    #[arg(long, value_enum, default_value_t = EncoderScale::Standard)]
    encoder: EncoderScale,
    /// Cross-validation fold count (with --fold; replaces the fraction split)
    #[arg(long, requires = "fold")]
    folds: Option<usize>,
    /// Cross-validation fold index, 0-based (with --folds)
    #[arg(long, requires = "folds")]
    fold: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining of the dual encoders on the unlabeled pool
    Pretrain {
        #[command(flatten)]
        opts: RunOpts,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Output directory for records and the encoder checkpoint
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a downstream head on frozen encoder representations
    TrainDownstream {
        #[command(flatten)]
        opts: RunOpts,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint from `pretrain`
        #[arg(long)]
        encoder_ckpt: PathBuf,
        /// Output directory for records and the head checkpoint
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an encoder + head checkpoint pair on the held-out test part
    Evaluate {
        #[command(flatten)]
        opts: RunOpts,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint from `pretrain`
        #[arg(long)]
        encoder_ckpt: PathBuf,
        /// Head checkpoint from `train-downstream`
        #[arg(long)]
        head_ckpt: PathBuf,
        /// Also write metrics.json here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Central-difference gradient checks of the full pipeline and the head
    Gradcheck {
        /// Task whose pipeline to check: cls | seg
        #[arg(long, default_value = "cls")]
        task: Task,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate a synthetic two-class vessel dataset
    GenSynth {
        /// Directory to write point files and the manifest into
        #[arg(long)]
        out: PathBuf,
        /// Clouds per class (two classes)
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        /// Points per generated cloud
        #[arg(long, default_value_t = 2048)]
        cloud_points: usize,
        /// Fraction of points on the bump for the positive class
        #[arg(long, default_value_t = 0.3)]
        bump_fraction: f64,
        /// Surface noise amplitude
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run the whole pipeline once per augmentation strategy
    AblateAugment {
        #[command(flatten)]
        opts: RunOpts,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Output directory; one subdirectory per strategy
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the whole pipeline once per labeled-fraction regime
    AblateLabels {
        #[command(flatten)]
        opts: RunOpts,
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Output directory; one subdirectory per fraction
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_points(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|_| format!("not a point count: {s}"))?;
    if [512, 1024, 2048].contains(&n) {
        Ok(n)
    } else {
        Err(format!("point budget must be one of 512, 1024, 2048; got {n}"))
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        let mut cause = e.source();
        while let Some(c) = cause {
            eprintln!("  caused by: {c}");
            cause = c.source();
        }
        std::process::exit(1);
    }
}

type CliResult = Result<(), Box<dyn Error>>;

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Pretrain { opts, data, out, resume } => cmd_pretrain(opts, data, out, resume),
        Command::TrainDownstream { opts, data, encoder_ckpt, out } => {
            cmd_train_downstream(opts, data, encoder_ckpt, out)
        }
        Command::Evaluate { opts, data, encoder_ckpt, head_ckpt, out } => {
            cmd_evaluate(opts, data, encoder_ckpt, head_ckpt, out)
        }
        Command::Gradcheck { task, seed } => cmd_gradcheck(task, seed),
        Command::GenSynth { out, per_class, cloud_points, bump_fraction, noise, seed } => {
            cmd_gen_synth(out, per_class, cloud_points, bump_fraction, noise, seed)
        }
        Command::AblateAugment { opts, data, out } => cmd_ablate(opts, data, out, Ablation::Augment),
        Command::AblateLabels { opts, data, out } => cmd_ablate(opts, data, out, Ablation::Labels),
    }
}

/// Resolve the run configuration from the config file (if any) and the
/// explicit flag overrides, in that order.
fn resolve_config(opts: &RunOpts) -> Result<RunConfig, Box<dyn Error>> {
    let mut cfg = match &opts.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::defaults(opts.task.unwrap_or(Task::Cls)),
    };
    if let Some(task) = opts.task {
        if opts.config.is_some() && cfg.task != task {
            return Err(format!(
                "--task {} disagrees with the config file's task {}",
                task.as_str(),
                cfg.task.as_str()
            )
            .into());
        }
        cfg.task = task;
    }
    if let Some(p) = opts.points {
        cfg.point_count = p;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
        cfg.split.seed = s;
    }
    if let Some(e) = opts.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn encoder_for(opts: &RunOpts, cfg: &RunConfig) -> EncoderConfig {
    match opts.encoder {
        EncoderScale::Standard => EncoderConfig::standard(cfg.point_count),
        EncoderScale::Tiny => EncoderConfig::tiny(),
    }
}

fn head_hidden(task: Task) -> &'static [usize] {
    match task {
        Task::Cls => CLS_HEAD_HIDDEN,
        Task::Seg => SEG_HEAD_HIDDEN,
    }
}

fn fold_of(opts: &RunOpts) -> Option<(usize, usize)> {
    opts.folds.zip(opts.fold)
}

fn load_data(path: &PathBuf) -> Result<Dataset, Box<dyn Error>> {
    Ok(load_dataset(path)?)
}

fn print_records(records: &[EpochRecord]) {
    for r in records {
        match r.train_accuracy {
            Some(acc) => println!(
                "epoch {:>4}  lr {:.3e}  loss {:.6}  train acc {:.2}%",
                r.epoch, r.lr, r.loss, acc
            ),
            None => println!("epoch {:>4}  lr {:.3e}  loss {:.6}", r.epoch, r.lr, r.loss),
        }
    }
}

fn summarize(report: &MetricsReport) -> String {
    let mut s = format!(
        "healthy acc {:.2}%, aneurysm acc {:.2}%",
        report.healthy_accuracy, report.aneurysm_accuracy
    );
    if let Some(f1) = report.f1_aneurysm {
        s.push_str(&format!(", aneurysm F1 {f1:.4}"));
    }
    if let (Some(hv), Some(av)) = (report.healthy_iou, report.aneurysm_iou) {
        s.push_str(&format!(", healthy IoU {hv:.2}, aneurysm IoU {av:.2}"));
    }
    s
}

fn cmd_pretrain(opts: RunOpts, data: PathBuf, out: PathBuf, resume: Option<PathBuf>) -> CliResult {
    let cfg = resolve_config(&opts)?;
    let enc = encoder_for(&opts, &cfg);
    let ds = load_data(&data)?;
    let splits = resolve_splits(&ds, &cfg, fold_of(&opts))?;
    let mut pool: Vec<usize> =
        splits.pool_a.iter().chain(&splits.labeled_b).copied().collect();
    pool.sort_unstable();
    let resume_ckpt = resume.map(|p| Checkpoint::load(&p)).transpose()?;
    fs::create_dir_all(&out)?;
    println!(
        "pretraining {} on {} clouds ({} held out), config {}",
        cfg.task.as_str(),
        pool.len(),
        splits.test.len(),
        cfg.hash_hex()
    );
    let outcome = pretrain::<f32>(
        &ds,
        &pool,
        &PretrainSpec {
            config: &cfg,
            encoder: &enc,
            out_dir: Some(&out),
            resume: resume_ckpt.as_ref(),
            stop_after_epoch: None,
        },
    )?;
    print_records(&outcome.records);
    println!("wrote {}", out.join("pretrain.ckpt").display());
    Ok(())
}

fn cmd_train_downstream(
    opts: RunOpts,
    data: PathBuf,
    encoder_ckpt: PathBuf,
    out: PathBuf,
) -> CliResult {
    let cfg = resolve_config(&opts)?;
    let enc = encoder_for(&opts, &cfg);
    let ds = load_data(&data)?;
    let splits = resolve_splits(&ds, &cfg, fold_of(&opts))?;
    let ckpt = Checkpoint::load(&encoder_ckpt)?;
    fs::create_dir_all(&out)?;
    println!(
        "training the {} head on {} labeled clouds, config {}",
        cfg.task.as_str(),
        splits.labeled_b.len(),
        cfg.hash_hex()
    );
    let outcome = train_downstream::<f32>(
        &ds,
        &splits.labeled_b,
        &ckpt,
        &DownstreamSpec {
            config: &cfg,
            encoder: &enc,
            head_hidden: head_hidden(cfg.task),
            out_dir: Some(&out),
            stop_at_accuracy: None,
        },
    )?;
    print_records(&outcome.records);
    println!("wrote {}", out.join("downstream.ckpt").display());
    Ok(())
}

fn cmd_evaluate(
    opts: RunOpts,
    data: PathBuf,
    encoder_ckpt: PathBuf,
    head_ckpt: PathBuf,
    out: Option<PathBuf>,
) -> CliResult {
    let cfg = resolve_config(&opts)?;
    let enc = encoder_for(&opts, &cfg);
    let ds = load_data(&data)?;
    let splits = resolve_splits(&ds, &cfg, fold_of(&opts))?;
    let encoder = Checkpoint::load(&encoder_ckpt)?;
    let head = Checkpoint::load(&head_ckpt)?;
    let report = evaluate::<f32>(&ds, &splits.test, &encoder, &head, &cfg, &enc)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        let path = dir.join("metrics.json");
        fs::write(&path, text + "\n")?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(task: Task, seed: u64) -> CliResult {
    let enc = encoder_gradient_report(task, seed)?;
    println!(
        "encoder pipeline ({}): max rel err {:.3e} at {}[{}] over {} coordinates",
        task.as_str(),
        enc.max_rel_err,
        enc.worst_param,
        enc.worst_index,
        enc.checked
    );
    let head = head_gradient_report(task, seed)?;
    println!(
        "downstream head ({}): max rel err {:.3e} at {}[{}] over {} coordinates",
        task.as_str(),
        head.max_rel_err,
        head.worst_param,
        head.worst_index,
        head.checked
    );
    let worst = enc.max_rel_err.max(head.max_rel_err);
    if worst >= GRADCHECK_TOLERANCE {
        return Err(format!(
            "gradient check failed: max rel err {worst:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
        )
        .into());
    }
    println!("gradients match central differences within {GRADCHECK_TOLERANCE:.0e}");
    Ok(())
}

fn cmd_gen_synth(
    out: PathBuf,
    per_class: usize,
    cloud_points: usize,
    bump_fraction: f64,
    noise: f64,
    seed: u64,
) -> CliResult {
    let spec = SynthSpec { per_class, points: cloud_points, bump_fraction, noise };
    let ds = gen_synthetic(&spec, seed);
    fs::create_dir_all(&out)?;
    let manifest = save_dataset(&out, &ds)?;
    println!(
        "wrote {} ({} clouds, {} points each)",
        manifest.display(),
        ds.len(),
        cloud_points
    );
    Ok(())
}

enum Ablation {
    Augment,
    Labels,
}

fn cmd_ablate(opts: RunOpts, data: PathBuf, out: PathBuf, which: Ablation) -> CliResult {
    let cfg = resolve_config(&opts)?;
    let enc = encoder_for(&opts, &cfg);
    let ds = load_data(&data)?;
    fs::create_dir_all(&out)?;
    let spec = PipelineSpec {
        config: &cfg,
        encoder: &enc,
        head_hidden: head_hidden(cfg.task),
        out_dir: Some(&out),
        fold: fold_of(&opts),
    };
    match which {
        Ablation::Augment => {
            for (kind, report) in ablate_augment::<f32>(&ds, &spec)? {
                println!("{:<20} {}", kind.as_str(), summarize(&report));
            }
        }
        Ablation::Labels => {
            for (fraction, report) in ablate_labels::<f32>(&ds, &spec)? {
                println!("{:>3.0}% labels          {}", fraction * 100.0, summarize(&report));
            }
        }
    }
    println!("per-run artifacts under {}", out.display());
    Ok(())
}
