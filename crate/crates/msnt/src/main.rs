//! Command-line front end: train models, assemble comparison tables, sweep
//! the MI curve, and dump the scaling grid.
//!
//! Exit codes: 0 ok, 2 usage error, 3 numeric failure, 4 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

// Large attention buffers are allocated and freed every step; the system
// allocator's mmap round-trips dominate wall time without this.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use msnt::data::TaskKind;
use msnt::models::{Arch, Model, ModelConfig, OutputKind};
use msnt::report::{
    cell_from_values, final_eval, format_table, mi_curve, read_trace_csv, scaling_grid,
    svg_line_plot, write_mi_curve_csv, write_scaling_csv, write_trace_csv, Cell,
};
use msnt::train::{knn_baseline_mae, train_with_hooks, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "msnt", about = "Multi-set transformer experiments", version)]
struct Cli {
    /// JSON config file (flat keys); explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model; writes a checkpoint and a loss-trace CSV.
    Train(TrainArgs),
    /// Assemble an architecture-by-dimension table from finished trials.
    Table(TableArgs),
    /// Sweep correlation values with a trained MI model and the KSG baseline.
    MiCurve(MiCurveArgs),
    /// Analytic MAC counts and timed forward passes over set sizes.
    Scaling(ScalingArgs),
}

#[derive(Args, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// Inclusive dimension range "A:B" for dimension-equivariant training.
    #[arg(long, value_name = "A:B")]
    dim_range: Option<String>,
    #[arg(long)]
    batches: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    eval_examples: Option<usize>,
    #[arg(long)]
    mc_eval_samples: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Run a held-out evaluation every N steps (0 = final eval only).
    #[arg(long)]
    eval_every: Option<u64>,
    /// Write partial checkpoint/trace every N steps (0 = off).
    #[arg(long)]
    snapshot_every: Option<u64>,
    /// Print the training loss every N steps (0 = quiet).
    #[arg(long, default_value_t = 500)]
    log_every: u64,
}

#[derive(Args, Clone)]
struct TableArgs {
    #[arg(long, default_value = "kl")]
    task: String,
    /// Comma-separated dimensions (table columns).
    #[arg(long, default_value = "2")]
    dims: String,
    /// Comma-separated architectures (table rows).
    #[arg(long, default_value = "multiset_transformer")]
    archs: String,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    knn_k: usize,
    #[arg(long)]
    eval_examples: Option<usize>,
    #[arg(long)]
    mc_eval_samples: Option<usize>,
}

#[derive(Args, Clone)]
struct MiCurveArgs {
    /// Checkpoint of a trained MI model.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    #[arg(long, default_value_t = 2000)]
    set_size: usize,
    #[arg(long, default_value_t = 3)]
    ksg_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ScalingArgs {
    #[arg(long, default_value = "2")]
    dim: usize,
    /// Comma-separated total set sizes (n+m).
    #[arg(long, default_value = "64,128,256")]
    sizes: String,
    /// Comma-separated architectures.
    #[arg(long, default_value = "multiset_transformer,multiset_rn,single_rff,pine,union_transformer")]
    archs: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Flat-key JSON config file; any subset of keys may appear.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    task: Option<String>,
    arch: Option<String>,
    dim: Option<usize>,
    dim_range: Option<String>,
    batches: Option<u64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    latent: Option<usize>,
    hidden: Option<usize>,
    blocks: Option<usize>,
    heads: Option<usize>,
    channels: Option<usize>,
    eval_examples: Option<usize>,
    mc_eval_samples: Option<usize>,
    grad_clip: Option<f64>,
    eval_every: Option<u64>,
    snapshot_every: Option<u64>,
}

enum AppError {
    Usage(String),
    Numeric(String),
    Io(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Numeric(_) => 3,
            AppError::Io(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Numeric(m) | AppError::Io(m) => m,
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> AppError {
        match &e {
            TrainError::NonFinite { .. } => AppError::Numeric(e.to_string()),
            TrainError::Optim(_) => AppError::Numeric(e.to_string()),
            TrainError::Data(msnt::data::DataError::Io(_)) => AppError::Io(e.to_string()),
            _ => AppError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError::Io(e.to_string())
    }
}

impl From<msnt::report::ReportError> for AppError {
    fn from(e: msnt::report::ReportError) -> AppError {
        match &e {
            msnt::report::ReportError::Io(_) => AppError::Io(e.to_string()),
            msnt::report::ReportError::Parse(_) => AppError::Io(e.to_string()),
            msnt::report::ReportError::Train(t) => AppError::Numeric(t.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file_cfg = match &cli.config {
        Some(p) => match load_file_config(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}", e.message());
                return ExitCode::from(e.code());
            }
        },
        None => FileConfig::default(),
    };
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args, &file_cfg),
        Cmd::Table(args) => cmd_table(args),
        Cmd::MiCurve(args) => cmd_mi_curve(args),
        Cmd::Scaling(args) => cmd_scaling(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_file_config(path: &Path) -> Result<FileConfig, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Io(format!("config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AppError::Usage(format!("config: {e}")))
}

fn arch_list() -> String {
    Arch::ALL
        .iter()
        .map(|a| a.name())
        .collect::<Vec<_>>()
        .join(", ")
}

fn parse_arch(s: &str) -> Result<Arch, AppError> {
    Arch::parse(s).ok_or_else(|| {
        AppError::Usage(format!("unknown arch '{s}'; available: {}", arch_list()))
    })
}

fn parse_task(s: &str) -> Result<TaskKind, AppError> {
    TaskKind::parse(s)
        .ok_or_else(|| AppError::Usage(format!("unknown task '{s}'; available: kl, mi, distinguish, count")))
}

fn parse_dim_range(s: &str) -> Result<(usize, usize), AppError> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| AppError::Usage(format!("bad dim range '{s}', expected A:B")))?;
    let lo = a.parse().map_err(|_| AppError::Usage(format!("bad dim range '{s}'")))?;
    let hi = b.parse().map_err(|_| AppError::Usage(format!("bad dim range '{s}'")))?;
    if lo == 0 || hi < lo {
        return Err(AppError::Usage(format!("bad dim range '{s}'")));
    }
    Ok((lo, hi))
}

fn resolve_train_config(args: &TrainArgs, file: &FileConfig) -> Result<TrainConfig, AppError> {
    let task_s = args
        .task
        .clone()
        .or_else(|| file.task.clone())
        .unwrap_or_else(|| "kl".to_string());
    let task = parse_task(&task_s)?;
    let arch_s = args
        .arch
        .clone()
        .or_else(|| file.arch.clone())
        .unwrap_or_else(|| "multiset_transformer".to_string());
    let arch = parse_arch(&arch_s)?;
    let dim = args.dim.or(file.dim).unwrap_or(2);

    let mut mc = ModelConfig::new(arch, dim);
    mc.d_latent = args.latent.or(file.latent).unwrap_or(32);
    mc.d_hidden = args.hidden.or(file.hidden).unwrap_or(2 * mc.d_latent);
    mc.n_blocks = args.blocks.or(file.blocks).unwrap_or(4);
    mc.n_heads = args.heads.or(file.heads).unwrap_or(4);
    mc.n_channels = args.channels.or(file.channels).unwrap_or(16);
    match task {
        TaskKind::Distinguish => {
            mc.output = OutputKind::Logit;
            mc.n_outputs = 1;
        }
        TaskKind::CountShared => {
            mc.output = OutputKind::ClassCount;
            mc.n_outputs = 11; // labels 0..=n_classes with default 10 classes
        }
        _ => {}
    }

    let mut cfg = TrainConfig::new(task, mc, args.seed.or(file.seed).unwrap_or(1));
    cfg.dim = dim;
    if let Some(dr) = args.dim_range.clone().or_else(|| file.dim_range.clone()) {
        cfg.dim_range = Some(parse_dim_range(&dr)?);
    }
    if cfg.dim_range.is_some() && cfg.model.arch != Arch::MultisetTransformerEqui {
        return Err(AppError::Usage(
            "--dim-range requires --arch multiset_transformer_equi".into(),
        ));
    }
    cfg.n_batches = args.batches.or(file.batches).unwrap_or(20_000);
    cfg.batch_size = args.batch_size.or(file.batch_size).unwrap_or(64);
    cfg.lr = args.lr.or(file.lr).unwrap_or(1e-4);
    cfg.eval_examples = args.eval_examples.or(file.eval_examples).unwrap_or(100);
    cfg.mc_eval_samples = args
        .mc_eval_samples
        .or(file.mc_eval_samples)
        .unwrap_or(100_000);
    cfg.grad_clip = args.grad_clip.or(file.grad_clip);
    cfg.eval_every = args.eval_every.or(file.eval_every).unwrap_or(0);
    cfg.snapshot_every = args.snapshot_every.or(file.snapshot_every).unwrap_or(0);
    if cfg.n_batches == 0 || cfg.lr < 0.0 {
        return Err(AppError::Usage("need batches >= 1 and lr >= 0".into()));
    }
    Ok(cfg)
}

fn run_stem(cfg: &TrainConfig) -> String {
    format!(
        "{}-{}-d{}-seed{}",
        cfg.task.name(),
        cfg.model.arch.name(),
        cfg.dim,
        cfg.seed
    )
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<(), AppError> {
    let cfg = resolve_train_config(&args, file)?;
    let out_dir = args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)?;
    println!(
        "train task={} arch={} dim={} batches={} batch_size={} lr={} seed={} latent={} hidden={} blocks={} heads={}",
        cfg.task.name(),
        cfg.model.arch.name(),
        cfg.dim,
        cfg.n_batches,
        cfg.batch_size,
        cfg.lr,
        cfg.seed,
        cfg.model.d_latent,
        cfg.model.d_hidden,
        cfg.model.n_blocks,
        cfg.model.n_heads
    );
    let log_every = args.log_every;
    let stem = run_stem(&cfg);
    let ckpt = out_dir.join(format!("model-{stem}.ckpt"));
    let trace_snapshot_path = out_dir.join(format!("trace-{stem}.partial.csv"));
    let ckpt_snapshot_path = out_dir.join(format!("model-{stem}.partial.ckpt"));
    let (model, trace) = train_with_hooks(
        &cfg,
        |step, loss| {
            if log_every > 0 && step % log_every == 0 {
                println!("step {step}: loss {loss:.6}");
            }
        },
        |model, trace| {
            // persist partial results so long runs can be inspected (and
            // salvaged) before they finish
            if let Err(e) = model.save(&ckpt_snapshot_path) {
                eprintln!("warning: snapshot checkpoint failed: {e}");
            }
            if let Err(e) = write_trace_csv(&trace_snapshot_path, trace) {
                eprintln!("warning: snapshot trace failed: {e}");
            }
            Ok(())
        },
    )?;
    let _ = std::fs::remove_file(&trace_snapshot_path);
    let _ = std::fs::remove_file(&ckpt_snapshot_path);
    model
        .save(&ckpt)
        .map_err(|e| AppError::Io(e.to_string()))?;
    let trace_path = out_dir.join(format!("trace-{stem}.csv"));
    write_trace_csv(&trace_path, &trace)?;
    if let Some(ev) = final_eval(&trace) {
        println!("final {} = {:.4}", ev.metric, ev.value);
    }
    let losses: Vec<(f64, f64)> = trace
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| (r.step as f64, r.value))
        .collect();
    let _ = svg_line_plot(
        &out_dir.join(format!("loss-{stem}.svg")),
        &format!("training loss {stem}"),
        &[("loss".to_string(), losses)],
    );
    println!("wrote {} and {}", ckpt.display(), trace_path.display());
    Ok(())
}

fn cmd_table(args: TableArgs) -> Result<(), AppError> {
    let task = parse_task(&args.task)?;
    let dims: Vec<usize> = args
        .dims
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| AppError::Usage(format!("bad dim '{s}'"))))
        .collect::<Result<_, _>>()?;
    let archs: Vec<Arch> = args
        .archs
        .split(',')
        .map(|s| parse_arch(s.trim()))
        .collect::<Result<_, _>>()?;

    let mut rows: Vec<(String, Vec<Option<Cell>>)> = Vec::new();
    for arch in &archs {
        let mut cells = Vec::new();
        for &d in &dims {
            let mut vals = Vec::new();
            for seed in 1..=args.trials as u64 {
                let stem = format!("{}-{}-d{}-seed{}", task.name(), arch.name(), d, seed);
                let path = args.out.join(format!("trace-{stem}.csv"));
                match read_trace_csv(&path) {
                    Ok(trace) => {
                        if let Some(ev) = final_eval(&trace) {
                            vals.push(ev.value);
                        }
                    }
                    Err(_) => eprintln!("warning: missing trial {}", path.display()),
                }
            }
            cells.push(if vals.is_empty() { None } else { Some(cell_from_values(&vals)) });
        }
        rows.push((arch.name().to_string(), cells));
    }

    // classical baseline row, computed directly (no training)
    if task == TaskKind::Kl {
        let mut cells = Vec::new();
        for &d in &dims {
            let mut cfg = TrainConfig::new(task, ModelConfig::new(Arch::SingleRff, d), 0);
            cfg.dim = d;
            if let Some(n) = args.eval_examples {
                cfg.eval_examples = n;
            }
            if let Some(n) = args.mc_eval_samples {
                cfg.mc_eval_samples = n;
            }
            let mae = knn_baseline_mae(&cfg, args.knn_k)?;
            cells.push(Some(Cell { mean: mae, std: 0.0, trials: 1 }));
        }
        rows.push(("knn".to_string(), cells));
    }

    let col_names: Vec<String> = dims.iter().map(|d| format!("d={d}")).collect();
    let table = format_table(
        &format!("{} mean absolute error ({} trials)", task.name(), args.trials),
        &col_names,
        &rows,
    );
    println!("{table}");
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join(format!("table-{}.md", task.name())), &table)?;
    Ok(())
}

fn cmd_mi_curve(args: MiCurveArgs) -> Result<(), AppError> {
    let mut model: Model<f32> =
        Model::load(&args.ckpt).map_err(|e| AppError::Io(e.to_string()))?;
    let grid: Vec<f64> = (-9..=9).map(|i| i as f64 / 10.0).collect();
    println!(
        "mi-curve dim={} set_size={} ksg_k={} seed={} grid=-0.9..0.9",
        args.dim, args.set_size, args.ksg_k, args.seed
    );
    let points = mi_curve(&mut model, args.dim, &grid, args.set_size, args.ksg_k, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let csv = args.out.join("mi_curve.csv");
    write_mi_curve_csv(&csv, &points)?;
    let series = vec![
        ("truth".to_string(), points.iter().map(|p| (p.rho, p.truth)).collect()),
        ("model".to_string(), points.iter().map(|p| (p.rho, p.model)).collect()),
        ("ksg".to_string(), points.iter().map(|p| (p.rho, p.ksg)).collect()),
    ];
    let _ = svg_line_plot(&args.out.join("mi_curve.svg"), "mutual information sweep", &series);
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_scaling(args: ScalingArgs) -> Result<(), AppError> {
    let sizes: Vec<usize> = args
        .sizes
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| AppError::Usage(format!("bad size '{s}'"))))
        .collect::<Result<_, _>>()?;
    let archs: Vec<Arch> = args
        .archs
        .split(',')
        .map(|s| parse_arch(s.trim()))
        .collect::<Result<_, _>>()?;
    let cfgs: Vec<ModelConfig> = archs
        .iter()
        .map(|&a| ModelConfig::new(a, args.dim))
        .collect();
    println!(
        "scaling dim={} sizes={:?} archs={:?} seed={}",
        args.dim,
        sizes,
        archs.iter().map(|a| a.name()).collect::<Vec<_>>(),
        args.seed
    );
    let points = scaling_grid(&cfgs, &sizes, args.dim, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let csv = args.out.join("scaling.csv");
    write_scaling_csv(&csv, &points)?;
    println!("wrote {}", csv.display());
    Ok(())
}
