//! Command-line front end: dataset synthesis, source pretraining, statistic
//! precomputation, partition inspection, adaptation runs, and the benchmark
//! sweep — all through the binary artifact formats, so each stage can run in
//! a different environment.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cafe_core::error::{CafeError, Result};
use cafe_core::io;
use cafe_core::stats::FeatureStats;
use cafe_core::tta::{self, Mode, TTAConfig, TTAReport};
use cafe_core::{bench, grouping, model};

#[derive(Parser)]
#[command(
    name = "cafe",
    version,
    about = "Covariance-aware feature alignment for test-time adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a class-conditional Gaussian-blob dataset
    GenData(GenDataArgs),
    /// Apply a parametric distribution shift to a dataset
    Shift(ShiftArgs),
    /// Pretrain the toy source model on a labeled dataset
    Pretrain(PretrainArgs),
    /// Freeze grouped source feature statistics for later adaptation
    Stats(StatsArgs),
    /// Re-derive the feature partition from a stats file
    Group(GroupArgs),
    /// Adapt a model on unlabeled target data against frozen statistics
    Adapt(AdaptArgs),
    /// Sweep methods × shifts × seeds and emit CSV/text/JSON reports
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShiftKindArg {
    None,
    MeanShift,
    Scale,
    Rotate,
    Noise,
    Mixed,
}

impl From<ShiftKindArg> for bench::ShiftKind {
    fn from(value: ShiftKindArg) -> Self {
        match value {
            ShiftKindArg::None => bench::ShiftKind::None,
            ShiftKindArg::MeanShift => bench::ShiftKind::MeanShift,
            ShiftKindArg::Scale => bench::ShiftKind::Scale,
            ShiftKindArg::Rotate => bench::ShiftKind::Rotate,
            ShiftKindArg::Noise => bench::ShiftKind::Noise,
            ShiftKindArg::Mixed => bench::ShiftKind::Mixed,
        }
    }
}

#[derive(Args)]
struct ShiftArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: ShiftKindArg,
    #[arg(long, default_value_t = 0.0)]
    magnitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// mixed components as kind:magnitude, repeated (e.g. mean-shift:2.0)
    #[arg(long = "component")]
    components: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.8)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// number of feature groups; defaults to min(128, feature dim)
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GroupArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Offline,
    Online,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "offline")]
    mode: ModeArg,
    /// must match the partition frozen in the stats file; defaults to it
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.8)]
    momentum: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long)]
    no_infomax: bool,
    #[arg(long)]
    no_align: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// write the run report as JSON (also written on failure)
    #[arg(long)]
    report: Option<PathBuf>,
    /// write per-step, per-group KL values as CSV
    #[arg(long)]
    dump_group_kl: Option<PathBuf>,
    /// save the adapted model
    #[arg(long)]
    out_model: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// benchmark configuration, .toml or .json
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Shift(args) => shift(args),
        Command::Pretrain(args) => pretrain(args),
        Command::Stats(args) => stats(args),
        Command::Group(args) => group(args),
        Command::Adapt(args) => adapt(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let data = bench::generate_source_dataset(args.classes, args.dim, args.n, args.seed)?;
    io::save_dataset(&data, &args.out)?;
    println!(
        "wrote {} samples ({} classes, dim {}) to {}",
        data.len(),
        data.class_count,
        data.dim(),
        args.out.display()
    );
    Ok(())
}

fn parse_component(text: &str) -> Result<bench::MixComponent> {
    let (kind, mag) = text
        .split_once(':')
        .ok_or_else(|| CafeError::invalid(format!("component '{text}' is not kind:magnitude")))?;
    let kind = ShiftKindArg::from_str(kind, true)
        .map_err(|_| CafeError::invalid(format!("unknown shift kind '{kind}'")))?;
    let magnitude: f64 = mag
        .parse()
        .map_err(|_| CafeError::invalid(format!("bad magnitude '{mag}'")))?;
    Ok(bench::MixComponent {
        kind: kind.into(),
        magnitude,
    })
}

fn shift(args: ShiftArgs) -> Result<()> {
    let data = io::load_dataset(&args.data)?;
    let spec = bench::ShiftSpec {
        kind: args.kind.into(),
        magnitude: args.magnitude,
        seed: args.seed,
        mix_components: args
            .components
            .iter()
            .map(|c| parse_component(c))
            .collect::<Result<Vec<_>>>()?,
    };
    let shifted = bench::apply_shift(&data, &spec)?;
    io::save_dataset(&shifted, &args.out)?;
    println!(
        "applied {} shift (magnitude {}) to {} samples → {}",
        spec.kind.label(),
        spec.magnitude,
        shifted.len(),
        args.out.display()
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> Result<()> {
    let data = io::load_dataset(&args.data)?;
    let init = model::ToyModel::seeded(
        data.dim(),
        args.hidden,
        args.feature_dim,
        data.class_count,
        args.seed,
    )?;
    let (trained, accuracy) = model::pretrain_source(
        &init,
        &data,
        args.epochs,
        args.lr,
        args.momentum,
        args.seed.wrapping_add(1),
    )?;
    io::save_model(&trained, &args.out)?;
    println!(
        "pretrained {} epochs: train accuracy {accuracy:.4}; model → {}",
        args.epochs,
        args.out.display()
    );
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let model = io::load_model(&args.model)?;
    let data = io::load_dataset(&args.data)?;
    let k = args.k.unwrap_or_else(|| model.feature_dim().min(128));
    let stats = tta::precompute_source_stats(&model, &data.inputs, k, args.eps, args.seed)?;
    io::save_stats(&stats, &args.out)?;
    println!(
        "froze {} groups over {} feature dims (ε = {:e}) → {}",
        stats.k(),
        stats.dim(),
        stats.epsilon(),
        args.out.display()
    );
    print!("{}", histogram(stats.partition()));
    Ok(())
}

fn histogram(partition: &grouping::GroupPartition) -> String {
    let mut counts = std::collections::BTreeMap::new();
    for members in partition.groups() {
        *counts.entry(members.len()).or_insert(0usize) += 1;
    }
    let mut out = String::from("group-size histogram:\n");
    for (size, count) in counts {
        let _ = writeln!(out, "  size {size:>4}: {count} group(s)");
    }
    out
}

fn group(args: GroupArgs) -> Result<()> {
    let stats = io::load_stats(&args.stats)?;
    let (mean, cov) = stats.reconstruct_block_stats();
    let reference = FeatureStats::new(mean, cov, 1)?;
    let adjacency = grouping::correlation_adjacency(&reference);
    let partition = grouping::spectral_cluster(&adjacency, args.k, args.seed)?;
    println!(
        "re-clustered {} dims into {} groups (max group size {})",
        stats.dim(),
        partition.k(),
        grouping::max_group_size(&partition)
    );
    print!("{}", histogram(&partition));
    for (i, members) in partition.groups().iter().enumerate() {
        println!("  group {i}: {members:?}");
    }
    Ok(())
}

fn write_failure_report(path: &Path, config: &TTAConfig, err: &CafeError) -> Result<()> {
    let payload = serde_json::json!({
        "config": config,
        "error": err.to_string(),
        "degeneracy_events": [err.to_string()],
    });
    std::fs::write(path, serde_json::to_string_pretty(&payload).unwrap())?;
    Ok(())
}

fn dump_group_kl(path: &Path, report: &TTAReport) -> Result<()> {
    let mut out = String::from("step,group,kl_ts,kl_st\n");
    for (step, (ts_row, st_row)) in report
        .per_group_kl_ts
        .iter()
        .zip(&report.per_group_kl_st)
        .enumerate()
    {
        for (g, (ts, st)) in ts_row.iter().zip(st_row).enumerate() {
            let _ = writeln!(out, "{step},{g},{ts:.12e},{st:.12e}");
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn adapt(args: AdaptArgs) -> Result<()> {
    let model = io::load_model(&args.model)?;
    let stats = io::load_stats(&args.stats)?;
    let data = io::load_dataset(&args.data)?;
    let mode = match args.mode {
        ModeArg::Offline => Mode::Offline,
        ModeArg::Online => Mode::Online,
    };
    let config = TTAConfig {
        lr: args.lr,
        momentum: args.momentum,
        batch_size: args.batch_size,
        k: args.k.unwrap_or_else(|| stats.k()),
        epsilon: args.eps,
        use_align: !args.no_align,
        use_infomax: !args.no_infomax,
        mode,
        seed: args.seed,
        epochs: args.epochs,
    };
    let outcome = match mode {
        Mode::Offline => {
            tta::adapt_offline(&model, &data.inputs, Some(&data.labels), &stats, &config)
        }
        Mode::Online => {
            tta::adapt_online(&model, &data.inputs, Some(&data.labels), &stats, &config)
        }
    };
    let (adapted, report) = match outcome {
        Ok(pair) => pair,
        Err(err) => {
            if let Some(path) = &args.report {
                write_failure_report(path, &config, &err)?;
            }
            return Err(err);
        }
    };
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap())?;
    }
    if let Some(path) = &args.dump_group_kl {
        dump_group_kl(path, &report)?;
    }
    if let Some(path) = &args.out_model {
        io::save_model(&adapted, path)?;
    }
    println!(
        "adapted over {} batches in {:.2}s",
        report.batches_consumed, report.wall_time_secs
    );
    if let (Some(first), Some(last)) = (report.loss_total.first(), report.loss_total.last()) {
        println!("total loss: {first:.6} → {last:.6}");
    }
    if let Some(acc) = report.accuracy {
        println!("accuracy: {acc:.4}");
    }
    if let (Some(before), Some(after)) = (report.frechet_before, report.frechet_after) {
        println!("feature-gap (block-diag Fréchet): {before:.6} → {after:.6}");
    }
    for event in &report.degeneracy_events {
        println!("degeneracy: {event}");
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let is_json = args
        .config
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    let config: bench::BenchConfig = if is_json {
        serde_json::from_str(&text)
            .map_err(|e| CafeError::FormatError(format!("bad JSON config: {e}")))?
    } else {
        toml::from_str(&text)
            .map_err(|e| CafeError::FormatError(format!("bad TOML config: {e}")))?
    };
    let result = bench::run_benchmark(&config, &args.out_dir)?;
    println!(
        "benchmark complete: {} cells → {}",
        result.cells.len(),
        args.out_dir.display()
    );
    print!(
        "{}",
        std::fs::read_to_string(args.out_dir.join("results.txt"))?
    );
    Ok(())
}
