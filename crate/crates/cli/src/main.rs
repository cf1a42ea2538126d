use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use distillfss::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
use distillfss::config::{self, ConfigMap};
use distillfss::data::{build_support_set, load_dataset, Dataset, SupportSet};
use distillfss::eval::{bench_inference, emit_report, evaluate, BenchConfig, BenchRecord, Model};
use distillfss::memory::TrackingAllocator;
use distillfss::model::ModelConfig;
use distillfss::synth::{synth_shapes, synth_source, synth_split};
use distillfss::training::{distill_fss, train_base, transfer_fss, BaseTrainConfig, TrainConfig, UnfreezePolicy};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "distillfss", version, about = "Few-shot segmentation with a support-free distilled student")]
struct Cli {
    /// `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic target train/test splits and the source corpus.
    Synth(SynthArgs),
    /// Episodic training of the teacher on a source dataset.
    TrainBase(TrainBaseArgs),
    /// Fine-tune a base teacher on a support set.
    Transfer(TransferArgs),
    /// Distil a teacher into a support-free student.
    Distill(DistillArgs),
    /// Test-split mIoU of a checkpoint.
    Eval(EvalArgs),
    /// Latency, memory and FLOPs against support size.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    train_items: usize,
    #[arg(long, default_value_t = 20)]
    test_items: usize,
    #[arg(long, default_value_t = 200)]
    source_items: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 2)]
    num_classes: u8,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
}

#[derive(Args)]
struct TrainBaseArgs {
    /// Source dataset root (`images/`, `masks/`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    num_classes: u8,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SupportArgs {
    /// Dataset root the support set is drawn from.
    #[arg(long)]
    support: PathBuf,
    #[arg(long, default_value_t = 2)]
    num_classes: u8,
    /// Support set size M.
    #[arg(long, default_value_t = 10)]
    shots: usize,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    support: SupportArgs,
    /// Comma-separated trainable blocks, e.g. `conv_mapper,conv_skip,classifier`.
    #[arg(long)]
    policy: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    support: SupportArgs,
    #[arg(long)]
    policy: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    /// Drop the distillation term from the objective.
    #[arg(long)]
    no_dist_loss: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 2)]
    num_classes: u8,
    /// Support dataset root; teachers only.
    #[arg(long)]
    support: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    shots: usize,
    #[arg(long, default_value_t = 10)]
    support_batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,25,50")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    n: Vec<u8>,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 3)]
    warmups: usize,
    #[arg(long, default_value_t = 10)]
    support_batch: usize,
    #[arg(long)]
    out: PathBuf,
}

fn check_device() -> Result<()> {
    match std::env::var("DISTILLFSS_DEVICE") {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => bail!("DISTILLFSS_DEVICE={d}: only `cpu` is available"),
        _ => Ok(()),
    }
}

fn file_config(path: Option<&Path>) -> Result<ConfigMap> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(config::parse(&text)?)
        }
        None => Ok(ConfigMap::new()),
    }
}

/// Prints the resolved settings and writes them next to the outputs.
fn echo(out: &Path, command: &str, pairs: &ConfigMap) -> Result<()> {
    let text = config::render(pairs);
    println!("# {command}\n{text}");
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{command}.config")), text)?;
    Ok(())
}

fn train_config(file: &ConfigMap, seed: Option<u64>, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut c = config::train_config(file, TrainConfig::default())?;
    if let Some(v) = seed {
        c.seed = v;
    }
    if let Some(v) = flags.epochs {
        c.epochs = v;
    }
    if let Some(v) = flags.lr {
        c.learning_rate = v;
    }
    if let Some(v) = flags.gamma {
        c.gamma = v;
    }
    if let Some(v) = flags.alpha {
        c.alpha = v;
    }
    c.validate()?;
    Ok(c)
}

fn policy(file: &ConfigMap, flag: Option<&str>) -> Result<UnfreezePolicy> {
    match flag.or(file.get("train.policy").map(String::as_str)) {
        Some(s) => Ok(UnfreezePolicy::parse(s)?),
        None => Ok(UnfreezePolicy::default()),
    }
}

fn support_set(args: &SupportArgs, seed: u64) -> Result<(Dataset, SupportSet)> {
    let ds = load_dataset(&args.support, args.num_classes)
        .with_context(|| format!("loading support data from {}", args.support.display()))?;
    let set = build_support_set(&ds, args.shots, seed)?;
    Ok((ds, set))
}

fn support_pairs(args: &SupportArgs, seed: u64) -> Vec<(String, String)> {
    vec![
        ("data.support".into(), args.support.display().to_string()),
        ("data.num_classes".into(), args.num_classes.to_string()),
        ("data.shots".into(), args.shots.to_string()),
        ("data.support_seed".into(), seed.to_string()),
    ]
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let pairs: ConfigMap = [
        ("synth.train_items", args.train_items.to_string()),
        ("synth.test_items", args.test_items.to_string()),
        ("synth.source_items", args.source_items.to_string()),
        ("synth.image_size", args.image_size.to_string()),
        ("synth.num_classes", args.num_classes.to_string()),
        ("synth.seed", seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    echo(&args.out, "synth", &pairs)?;
    synth_shapes(args.train_items, args.image_size, args.num_classes, seed)?.save(&args.out.join("train"))?;
    synth_split(args.test_items, args.image_size, args.num_classes, seed, distillfss::data::Split::Test)?
        .save(&args.out.join("test"))?;
    synth_source(args.source_items, args.image_size, seed.wrapping_add(1000))?.save(&args.out.join("source"))?;
    println!("wrote train/test/source under {}", args.out.display());
    Ok(())
}

fn cmd_train_base(args: &TrainBaseArgs, file: &ConfigMap, seed: Option<u64>) -> Result<()> {
    let mut cfg = config::base_config(file, BaseTrainConfig::default())?;
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    cfg.validate()?;
    let mut model_pairs: ConfigMap = ModelConfig::default().to_pairs().into_iter().collect();
    model_pairs.extend(file.iter().filter(|(k, _)| k.starts_with("model.")).map(|(k, v)| (k.clone(), v.clone())));
    let model = ModelConfig::from_pairs(&model_pairs)?;
    let mut pairs: ConfigMap = cfg.to_pairs().into_iter().chain(model.to_pairs()).collect();
    pairs.insert("data.source".into(), args.data.display().to_string());
    echo(&args.out, "train-base", &pairs)?;

    let source = load_dataset(&args.data, args.num_classes)?;
    let (teacher, losses) = train_base(&source, model, &cfg)?;
    let log: String =
        std::iter::once("step,loss".to_string()).chain(losses.iter().enumerate().map(|(i, l)| format!("{i},{l}"))).collect::<Vec<_>>().join("\n");
    fs::write(args.out.join("base_losses.csv"), log + "\n")?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    let ckpt = Checkpoint::from_teacher(&teacher)
        .with_config(pairs)
        .with_metrics([("final_loss".to_string(), format!("{final_loss:.6}"))]);
    let path = args.out.join("base.ckpt");
    save_checkpoint(&ckpt, &path)?;
    println!("final loss (last 100 steps) {final_loss:.6}\nwrote {}", path.display());
    Ok(())
}

fn cmd_transfer(args: &TransferArgs, file: &ConfigMap, seed: Option<u64>) -> Result<()> {
    let cfg = train_config(file, seed, &args.train)?;
    let pol = policy(file, args.policy.as_deref())?;
    let base = load_checkpoint(&args.checkpoint)?;
    let mut pairs: ConfigMap = base.config.clone();
    pairs.extend(cfg.to_pairs());
    pairs.extend(support_pairs(&args.support, cfg.seed));
    pairs.insert("train.policy".into(), pol.to_string());
    echo(&args.out, "transfer", &pairs)?;

    let teacher = base.into_teacher()?;
    let (_, support) = support_set(&args.support, cfg.seed)?;
    let (adapted, report) = transfer_fss(&teacher, &support, &pol, &cfg)?;
    let ckpt = Checkpoint::from_teacher(&adapted).with_config(pairs).with_metrics(report.to_pairs());
    let path = args.out.join("teacher.ckpt");
    save_checkpoint(&ckpt, &path)?;
    println!(
        "support mIoU {:.4} -> {:.4} (epoch {})\nwrote {}",
        report.initial_miou,
        report.best_miou,
        report.best_epoch,
        path.display()
    );
    Ok(())
}

fn cmd_distill(args: &DistillArgs, file: &ConfigMap, seed: Option<u64>) -> Result<()> {
    let cfg = train_config(file, seed, &args.train)?;
    let pol = policy(file, args.policy.as_deref())?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut pairs: ConfigMap = ckpt.config.clone();
    pairs.extend(cfg.to_pairs());
    pairs.extend(support_pairs(&args.support, cfg.seed));
    pairs.insert("train.policy".into(), pol.to_string());
    pairs.insert("train.dist_loss".into(), (!args.no_dist_loss).to_string());
    echo(&args.out, "distill", &pairs)?;

    let teacher = ckpt.into_teacher()?;
    let (_, support) = support_set(&args.support, cfg.seed)?;
    let d = distill_fss(&teacher, &support, &pol, &cfg, !args.no_dist_loss)?;
    let out = Checkpoint::from_student(&d.student).with_config(pairs).with_metrics(d.report.to_pairs());
    let path = args.out.join("student.ckpt");
    save_checkpoint(&out, &path)?;
    println!(
        "student support mIoU {:.4} (epoch {})\nwrote {}",
        d.report.best_miou,
        d.report.best_epoch,
        path.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let kind = ckpt.kind;
    let mut pairs: ConfigMap = ckpt.config.clone();
    pairs.insert("eval.checkpoint".into(), args.checkpoint.display().to_string());
    pairs.insert("eval.test".into(), args.test.display().to_string());
    pairs.insert("eval.support_batch".into(), args.support_batch.to_string());
    if let Some(s) = &args.support {
        pairs.insert("eval.support".into(), s.display().to_string());
        pairs.insert("eval.shots".into(), args.shots.to_string());
    }
    echo(&args.out, "eval", &pairs)?;

    let test = load_dataset(&args.test, args.num_classes)?;
    let metrics = match kind {
        ModelKind::Student => {
            if args.support.is_some() {
                bail!("student checkpoints are support-free; drop --support");
            }
            let student = ckpt.into_student()?;
            evaluate(Model::Student(&student), &test, None, args.support_batch)?
        }
        ModelKind::Teacher => {
            let Some(root) = &args.support else { bail!("teacher evaluation needs --support") };
            let seed = pairs.get("data.support_seed").and_then(|v| v.parse().ok()).unwrap_or(0);
            let ds = load_dataset(root, args.num_classes)?;
            let support = build_support_set(&ds, args.shots, seed)?;
            let teacher = ckpt.into_teacher()?;
            evaluate(Model::Teacher(&teacher), &test, Some(&support), args.support_batch)?
        }
    };
    let mut lines = vec![format!("model = {}", kind.as_str()), format!("miou = {:.6}", metrics.miou())];
    for &c in metrics.classes() {
        if let (Some(iou), Some((tp, fp, fn_))) = (metrics.iou(c), metrics.counts(c)) {
            lines.push(format!("class{c}.iou = {iou:.6}"));
            lines.push(format!("class{c}.tp_fp_fn = {tp},{fp},{fn_}"));
        }
    }
    let text = lines.join("\n") + "\n";
    fs::write(args.out.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_bench(args: &BenchArgs, seed: u64) -> Result<()> {
    let cfg = BenchConfig {
        shots: args.k.clone(),
        ways: args.n.clone(),
        image_size: args.image_size,
        repeats: args.repeats,
        warmups: args.warmups,
        support_batch: Some(args.support_batch),
        seed,
    };
    let mut pairs = BTreeMap::new();
    pairs.insert("bench.k".to_string(), format!("{:?}", cfg.shots));
    pairs.insert("bench.n".to_string(), format!("{:?}", cfg.ways));
    pairs.insert("bench.image_size".to_string(), cfg.image_size.to_string());
    pairs.insert("bench.repeats".to_string(), cfg.repeats.to_string());
    pairs.insert("bench.warmups".to_string(), cfg.warmups.to_string());
    pairs.insert("bench.support_batch".to_string(), args.support_batch.to_string());
    pairs.insert("bench.seed".to_string(), seed.to_string());
    for (i, c) in args.checkpoints.iter().enumerate() {
        pairs.insert(format!("bench.checkpoint{i}"), c.display().to_string());
    }
    echo(&args.out, "bench", &pairs)?;

    let mut records: Vec<BenchRecord> = Vec::new();
    for path in &args.checkpoints {
        let ckpt = load_checkpoint(path)?;
        match ckpt.kind {
            ModelKind::Teacher => {
                let t = ckpt.into_teacher()?;
                records.extend(bench_inference(Model::Teacher(&t), &cfg)?);
            }
            ModelKind::Student => {
                let s = ckpt.into_student()?;
                records.extend(bench_inference(Model::Student(&s), &cfg)?);
            }
        }
    }
    for p in emit_report(&records, &[], &args.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    check_device()?;
    let file = file_config(cli.config.as_deref())?;
    let seed = match cli.seed {
        Some(s) => Some(s),
        None => file.get("seed").map(|v| v.parse()).transpose().context("config field `seed`")?,
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, seed.unwrap_or(1)),
        Command::TrainBase(a) => cmd_train_base(a, &file, seed),
        Command::Transfer(a) => cmd_transfer(a, &file, seed),
        Command::Distill(a) => cmd_distill(a, &file, seed),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a, seed.unwrap_or(0)),
    }
}
