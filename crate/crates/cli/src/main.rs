//! `wgqa`: initialise, convert, train, evaluate and inspect weighted
//! grouped-query attention models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! or tolerance failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use wgqa_core::analysis::head_divergence;
use wgqa_core::autograd::grad_check;
use wgqa_core::checkpoint::{convert, Checkpoint};
use wgqa_core::trainer::{evaluate, train, AdamWConfig, ModelConfig, TaskKind, ToyModel, ToyTask, TrainConfig, TrainError};
use wgqa_core::{
    kv_cache_bytes, param_count_extra, AttentionBlock, AttentionConfig, InitScheme, SeededRng, Variant, Weighting,
};

#[derive(Parser)]
#[command(name = "wgqa", version, about = "Weighted grouped-query attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded MHA toy encoder-decoder checkpoint.
    Init(InitArgs),
    /// Convert an MHA checkpoint into a grouped or weighted variant.
    Convert(ConvertArgs),
    /// Train a checkpoint on a synthetic task.
    Train(TrainArgs),
    /// Greedy-decode a task's evaluation set and report accuracy.
    Eval(EvalArgs),
    /// Check analytic attention gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare learned aggregation against mean pooling.
    Analyze(AnalyzeArgs),
    /// Count parameters added by a weighted variant.
    Params(ParamsArgs),
    /// Estimate KV-cache size during decoding.
    Kvcache(KvcacheArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value_t = 16)]
    vocab_size: usize,
    #[arg(long, visible_alias = "d", default_value_t = 32)]
    d_model: usize,
    #[arg(long, visible_alias = "h", default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    /// Number of key/value groups; defaults to h/2 where the variant allows a choice.
    #[arg(long)]
    groups: Option<usize>,
    /// Aggregation weight init for weighted variants: mean or rand.
    #[arg(long, default_value = "mean", value_parser = parse_init)]
    init: InitScheme,
    /// Required with --init rand.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TaskArgs {
    /// copy, reverse or token-map.
    #[arg(long, default_value = "copy", value_parser = parse_task)]
    task: TaskKind,
    /// Seeds the token map and the held-out evaluation set.
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    /// Defaults to the model's max_len.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 100)]
    steps_per_epoch: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    seed: u64,
    /// Per-step training log.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 200)]
    examples: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// A variant name, or `all`.
    #[arg(long, default_value = "all")]
    variant: String,
    #[arg(long, visible_alias = "d", default_value_t = 8)]
    d_model: usize,
    #[arg(long, visible_alias = "h", default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long, default_value = "rand", value_parser = parse_init)]
    init: InitScheme,
    #[arg(long)]
    causal: bool,
    #[arg(long)]
    cross: bool,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Per-group MAD values.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, visible_alias = "d")]
    d_model: usize,
    #[arg(long, visible_alias = "h")]
    heads: usize,
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long)]
    groups: Option<usize>,
    /// Number of decoder attention blocks.
    #[arg(long)]
    blocks: usize,
}

#[derive(Args)]
struct KvcacheArgs {
    #[arg(long, visible_alias = "d")]
    d_model: usize,
    #[arg(long, visible_alias = "h")]
    heads: usize,
    /// Defaults to the number of heads (MHA).
    #[arg(long, visible_alias = "g")]
    groups: Option<usize>,
    #[arg(long, default_value_t = 512)]
    seq_len: u64,
    #[arg(long, default_value_t = 12)]
    layers: u64,
    #[arg(long, default_value_t = 2)]
    blocks_per_layer: u64,
    #[arg(long, default_value_t = 4)]
    bytes_per_elem: u64,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: wgqa_core::AttentionError| e.to_string())
}

fn parse_init(s: &str) -> Result<InitScheme, String> {
    s.parse().map_err(|e: wgqa_core::AttentionError| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: TrainError| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

trait Classify<T> {
    fn or_usage(self) -> Result<T, Failure>;
    fn or_data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind: Kind::Usage,
            error: e.into(),
        })
    }

    fn or_data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind: Kind::Data,
            error: e.into(),
        })
    }
}

fn fail(kind: Kind, error: anyhow::Error) -> Failure {
    Failure { kind, error }
}

fn train_failure(e: TrainError) -> Failure {
    let kind = match &e {
        TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => Kind::Numeric,
        TrainError::Config(_) | TrainError::Input(_) => Kind::Usage,
        _ => Kind::Data,
    };
    fail(kind, e.into())
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load_file(path)
        .with_context(|| format!("reading {}", path.display()))
        .or_data()
}

fn save(ckpt: &Checkpoint, path: &Path) -> CmdResult {
    ckpt.save_file(path)
        .with_context(|| format!("writing {}", path.display()))
        .or_data()
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .or_data()
}

fn load_model(path: &Path) -> Result<ToyModel, Failure> {
    let ckpt = load(path)?;
    ToyModel::from_checkpoint(&ckpt)
        .with_context(|| format!("loading model from {}", path.display()))
        .or_data()
}

fn build_task(args: &TaskArgs, model: &ToyModel) -> Result<ToyTask, Failure> {
    let max_len = args.max_len.unwrap_or(model.config.max_len);
    ToyTask::new(args.task, model.config.vocab_size, args.min_len, max_len, args.task_seed).map_err(train_failure)
}

fn cmd_init(a: InitArgs) -> CmdResult {
    let config = ModelConfig {
        vocab_size: a.vocab_size,
        d_model: a.d_model,
        n_heads: a.heads,
        n_layers: a.layers,
        max_len: a.max_len,
    };
    let model = ToyModel::init_mha(config, a.seed).or_usage()?;
    let ckpt = model.to_checkpoint();
    save(&ckpt, &a.out)?;
    for (name, t) in &ckpt.tensors {
        println!("{name:<28} {:>12} {:>8}", format!("{:?}", t.shape()), t.len());
    }
    println!("total parameters: {}", ckpt.param_count());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_convert(a: ConvertArgs) -> CmdResult {
    let weighting = a.variant.weighting();
    if weighting != Weighting::None && a.init == InitScheme::Gaussian && a.seed.is_none() {
        return Err(fail(Kind::Usage, anyhow!("--init rand requires --seed")));
    }
    let ckpt = load(&a.input)?;
    let source = ckpt
        .decoder_config()
        .or_data()?
        .ok_or_else(|| fail(Kind::Data, anyhow!("checkpoint has no geometry metadata")))?;
    let groups = a.variant.resolve_groups(source.n_heads, a.groups).or_usage()?;
    let target = AttentionConfig::new(source.d_model, source.n_heads, groups, weighting)
        .or_usage()?
        .with_init(a.init);
    let out = convert(&ckpt, &target, a.seed.unwrap_or(0)).or_data()?;
    let n_blocks = out.decoder_blocks().len();
    save(&out, &a.out)?;
    println!(
        "converted {n_blocks} decoder attention blocks to {} (G={groups})",
        target.variant().label(target.init)
    );
    println!("+{} parameters", param_count_extra(&target, n_blocks));
    println!("total parameters: {} -> {}", ckpt.param_count(), out.param_count());
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut model = load_model(&a.input)?;
    let task = build_task(&a.task, &model)?;
    let cfg = TrainConfig {
        initial_lr: a.lr,
        epochs: a.epochs,
        steps_per_epoch: a.steps_per_epoch,
        batch_size: a.batch_size,
        seed: a.seed,
        optimizer: AdamWConfig::default(),
    };
    let log = train(&mut model, &task, &cfg).map_err(train_failure)?;
    for epoch in 0..cfg.epochs {
        if let Some(loss) = log.epoch_mean_loss(epoch) {
            println!("epoch {epoch}: mean loss {loss:.6}");
        }
    }
    if let Some(loss) = log.final_loss() {
        println!("final step loss {loss:.6}");
    }
    if let Some(path) = &a.csv {
        write_text(path, &log.to_csv())?;
    }
    save(&model.to_checkpoint(), &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let model = load_model(&a.input)?;
    let task = build_task(&a.task, &model)?;
    let r = evaluate(&model, &task, a.examples).map_err(train_failure)?;
    println!("task {} ({} examples, {} tokens)", task.kind, r.n_examples, r.n_tokens);
    println!("exact match: {:.4}", r.exact_match);
    println!("token accuracy: {:.4}", r.token_accuracy);
    if let Some(path) = &a.csv {
        let text = format!(
            "metric,value\nexact_match,{:e}\ntoken_accuracy,{:e}\nn_examples,{}\nn_tokens,{}\n",
            r.exact_match, r.token_accuracy, r.n_examples, r.n_tokens
        );
        write_text(path, &text)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let variants: Vec<Variant> = if a.variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![parse_variant(&a.variant).map_err(|e| fail(Kind::Usage, anyhow!(e)))?]
    };
    let mut all_passed = true;
    let mut csv = String::new();
    for (i, variant) in variants.into_iter().enumerate() {
        let groups = variant.resolve_groups(a.heads, a.groups).or_usage()?;
        let mha = AttentionConfig::mha(a.d_model, a.heads)
            .and_then(|c| c.with_causal(a.causal))
            .and_then(|c| c.with_cross(a.cross))
            .or_usage()?;
        let target = mha
            .with_groups(groups, variant.weighting())
            .or_usage()?
            .with_init(a.init);
        let mut rng = SeededRng::new(a.seed);
        let block = AttentionBlock::random_mha(mha, &mut rng)
            .and_then(|b| AttentionBlock::from_mha(&b.projections, target, &mut rng))
            .or_usage()?;
        let report = grad_check(&block, a.seed, a.eps, a.tol).map_err(|e| fail(Kind::Numeric, e.into()))?;
        println!("{report}");
        all_passed &= report.passed();
        let body = report.to_csv();
        if i == 0 {
            csv.push_str(&body);
        } else {
            csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
        }
    }
    if let Some(path) = &a.csv {
        write_text(path, &csv)?;
    }
    if all_passed {
        Ok(())
    } else {
        Err(fail(Kind::Numeric, anyhow!("gradient check failed at tol {:e}", a.tol)))
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    let ckpt = load(&a.input)?;
    let report = head_divergence(&ckpt).or_data()?;
    println!("{report}");
    if let Some(path) = &a.csv {
        write_text(path, &report.to_csv())?;
    }
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> CmdResult {
    let groups = a.variant.resolve_groups(a.heads, a.groups).or_usage()?;
    let cfg = AttentionConfig::new(a.d_model, a.heads, groups, a.variant.weighting()).or_usage()?;
    let extra = param_count_extra(&cfg, a.blocks);
    println!(
        "{} d={} h={} G={groups} blocks={}: +{extra} parameters",
        a.variant, a.d_model, a.heads, a.blocks
    );
    Ok(())
}

fn cmd_kvcache(a: KvcacheArgs) -> CmdResult {
    let groups = a.groups.unwrap_or(a.heads);
    let cfg = AttentionConfig::new(a.d_model, a.heads, groups, Weighting::None).or_usage()?;
    let bytes = kv_cache_bytes(&cfg, a.seq_len, a.layers, a.blocks_per_layer, a.bytes_per_elem).or_usage()?;
    println!(
        "d={} h={} G={groups} seq_len={} layers={} blocks/layer={}: {bytes} bytes ({:.3} MiB)",
        a.d_model,
        a.heads,
        a.seq_len,
        a.layers,
        a.blocks_per_layer,
        bytes as f64 / (1024.0 * 1024.0)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Kind::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Params(a) => cmd_params(a),
        Command::Kvcache(a) => cmd_kvcache(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind as u8)
        }
    }
}
