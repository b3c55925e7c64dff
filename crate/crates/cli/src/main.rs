//! bitstack — compress a reference network into importance-sorted residual
//! blocks and load it back at any byte budget.
//!
//! The pipeline is three commands: `decompose` splits every weight into a
//! stack of one-bit residual blocks, `sort` orders all blocks of all weights
//! into one universal sequence by measured importance, and `load-eval` /
//! `sweep` materialize the model a byte budget affords and score it against
//! the original network. `sizes` reports block sizes and `verify` validates
//! a container.
//!
//! Every command is deterministic under a fixed seed and reads nothing it
//! does not name. Errors print a single line `error[<code>]: <detail>` and
//! exit nonzero: 2 usage, 3 io, 4 format, 5 compute, 6 config.
//! `BITSTACK_THREADS` caps internal parallelism.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bitstack_core::harness::{
    budget_sweep, build_calibration, build_network, decompose_model, evaluator_for,
    linspace_budgets, read_bmat, read_bnet, stream_seed, sweep_csv, HarnessError, SweepRow,
    SHUFFLE_STREAM,
};
use bitstack_core::loader::{block_size_bits, format_mib2, load_model, resolve_budget};
use bitstack_core::stack::{apply_importance, sort_average, sort_greedy, sort_random, Evaluator};
use bitstack_core::store::{read_container, write_container, StoreError};
use bitstack_core::{
    CalibSource, ModelArtifacts, NetShape, Precision, RunParams, SortStrategy, WeightSource,
};

// ── Exit codes and error funnel ─────────────────────────────────────────────

const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_COMPUTE: u8 = 5;
const EXIT_CONFIG: u8 = 6;

/// One reportable failure: a short machine-parsable code, the exit status
/// it maps to, and human-readable detail.
struct CliError {
    code: &'static str,
    exit: u8,
    detail: String,
}

impl CliError {
    fn config(detail: impl Into<String>) -> Self {
        Self {
            code: "config",
            exit: EXIT_CONFIG,
            detail: detail.into(),
        }
    }

    fn io(detail: impl Into<String>) -> Self {
        Self {
            code: "io",
            exit: EXIT_IO,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::IoFailure(inner) => CliError::io(inner.to_string()),
            other => CliError {
                code: "format",
                exit: EXIT_FORMAT,
                detail: other.to_string(),
            },
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::IoFailure(inner) => CliError::io(inner.to_string()),
            HarnessError::BadFile { .. } => CliError {
                code: "format",
                exit: EXIT_FORMAT,
                detail: e.to_string(),
            },
            HarnessError::BadConfig(_) | HarnessError::ShapeMismatch(_) => {
                CliError::config(e.to_string())
            }
            HarnessError::Decomposition(_) | HarnessError::Plan(_) | HarnessError::Sort(_) => {
                CliError {
                    code: "compute",
                    exit: EXIT_COMPUTE,
                    detail: e.to_string(),
                }
            }
        }
    }
}

// ── Argument grammar ────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "bitstack",
    version,
    about = "Compress weight matrices into importance-sorted residual blocks \
             and reload them at any byte budget"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose a reference network into residual-block stacks
    Decompose(DecomposeArgs),
    /// Order all blocks into one universal sequence by importance
    Sort(SortArgs),
    /// Load a sorted container at a byte budget and score the result
    LoadEval(LoadEvalArgs),
    /// Print residual-block sizes, for a container or for preset shapes
    Sizes(SizesArgs),
    /// Score a sorted container across a range of budgets
    Sweep(SweepArgs),
    /// Validate a container and print its summary
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Half,
    Single,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Half => Precision::Half,
            PrecisionArg::Single => Precision::Single,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Average,
    Greedy,
    Random,
}

impl From<StrategyArg> for SortStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Average => SortStrategy::Average,
            StrategyArg::Greedy => SortStrategy::Greedy,
            StrategyArg::Random => SortStrategy::Random,
        }
    }
}

#[derive(Args)]
struct DecomposeArgs {
    /// Output container path
    #[arg(short, long)]
    out: PathBuf,
    /// Master seed for the network, calibration batch, and shuffles
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Residual blocks per weight
    #[arg(long, default_value_t = 16)]
    iters: usize,
    /// Rank of each block's factors
    #[arg(long, default_value_t = 16)]
    rank: usize,
    /// Storage precision of factor entries
    #[arg(long, value_enum, default_value_t = PrecisionArg::Half)]
    precision: PrecisionArg,
    /// Network depth in layers [default: 4, or taken from --weights]
    #[arg(long)]
    layers: Option<usize>,
    /// Square maps per layer [default: 2, or taken from --weights]
    #[arg(long)]
    maps: Option<usize>,
    /// Stream width [default: 64, or taken from --weights]
    #[arg(long)]
    hidden: Option<usize>,
    /// Calibration batch rows [default: 256, or taken from --calib]
    #[arg(long)]
    calib_rows: Option<usize>,
    /// Leading calibration rows used when measuring importance
    #[arg(long, default_value_t = 32)]
    sort_rows: usize,
    /// Network weights file (.bnet) instead of seeded weights
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Calibration batch file (.bmat) instead of a seeded batch
    #[arg(long)]
    calib: Option<PathBuf>,
}

#[derive(Args)]
struct SortArgs {
    /// Container to sort
    #[arg(short, long)]
    input: PathBuf,
    /// Output container path
    #[arg(short, long)]
    out: PathBuf,
    /// Ordering strategy
    #[arg(long, value_enum, default_value_t = StrategyArg::Average)]
    strategy: StrategyArg,
}

#[derive(Args)]
struct LoadEvalArgs {
    /// Sorted container to load from
    #[arg(short, long)]
    input: PathBuf,
    /// Byte budget; accepts KiB/MiB/GiB suffixes (e.g. 1.5MiB)
    #[arg(long, value_parser = parse_bytes)]
    budget: u64,
    /// Calibration rows to score on [default: the full calibration batch]
    #[arg(long)]
    rows: Option<usize>,
}

#[derive(Args)]
struct SizesArgs {
    /// Report the per-weight sizes of this container instead of presets
    #[arg(short, long)]
    input: Option<PathBuf>,
    /// Factor rank for the preset table (ignored with --input)
    #[arg(long, default_value_t = 16)]
    rank: usize,
    /// Also write the table as CSV to this path
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sorted container to sweep
    #[arg(short, long)]
    input: PathBuf,
    /// CSV output path
    #[arg(short, long)]
    out: PathBuf,
    /// Smallest budget; accepts KiB/MiB/GiB suffixes
    #[arg(long, value_parser = parse_bytes, default_value = "0")]
    min: u64,
    /// Largest budget [default: the container's total block payload]
    #[arg(long, value_parser = parse_bytes)]
    max: Option<u64>,
    /// Number of evenly spaced budgets
    #[arg(long, default_value_t = 50, conflicts_with = "stride")]
    points: usize,
    /// Fixed byte step between budgets instead of --points
    #[arg(long, value_parser = parse_bytes)]
    stride: Option<u64>,
    /// Calibration rows to score on [default: the full calibration batch]
    #[arg(long)]
    rows: Option<usize>,
    /// Also write a gnuplot script rendering the sweep to this path
    #[arg(long)]
    gnuplot: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Container to validate
    #[arg(short, long)]
    input: PathBuf,
}

/// Parse a byte count with optional binary-unit suffix: plain integers,
/// or decimals with B/KiB/MiB/GiB (IEC powers of two).
fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    let (digits, multiplier) = if let Some(p) = lower.strip_suffix("gib") {
        (p, 1u64 << 30)
    } else if let Some(p) = lower.strip_suffix("mib") {
        (p, 1 << 20)
    } else if let Some(p) = lower.strip_suffix("kib") {
        (p, 1 << 10)
    } else if let Some(p) = lower.strip_suffix('b') {
        (p, 1)
    } else {
        (lower.as_str(), 1)
    };
    let digits = digits.trim();
    if let Ok(whole) = digits.parse::<u64>() {
        return whole
            .checked_mul(multiplier)
            .ok_or_else(|| format!("byte count '{s}' overflows"));
    }
    let value: f64 = digits
        .parse()
        .map_err(|_| format!("unparsable byte count '{s}' (use e.g. 4096, 64KiB, 1.5MiB)"))?;
    if !value.is_finite() || value < 0.0 {
        return Err(format!("byte count '{s}' must be finite and nonnegative"));
    }
    let bytes = value * multiplier as f64;
    if bytes > u64::MAX as f64 {
        return Err(format!("byte count '{s}' overflows"));
    }
    Ok(bytes.floor() as u64)
}

// ── Entry point ─────────────────────────────────────────────────────────────

fn main() -> ExitCode {
    // Rust ignores SIGPIPE, which turns `bitstack sizes | head` into a
    // broken-pipe panic; die silently like any other line filter instead.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Decompose(args) => cmd_decompose(&args),
        Command::Sort(args) => cmd_sort(&args),
        Command::LoadEval(args) => cmd_load_eval(&args),
        Command::Sizes(args) => cmd_sizes(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Verify(args) => cmd_verify(&args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.detail);
            ExitCode::from(e.exit)
        }
    }
}

/// Apply the BITSTACK_THREADS cap to the global worker pool.
fn configure_threads() -> Result<(), CliError> {
    match std::env::var("BITSTACK_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(CliError::config("BITSTACK_THREADS is not valid unicode"))
        }
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| {
                CliError::config(format!("BITSTACK_THREADS must be a positive integer, got '{v}'"))
            })?;
            if n == 0 {
                return Err(CliError::config("BITSTACK_THREADS must be at least 1"));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::config(format!("cannot size the worker pool: {e}")))
        }
    }
}

// ── decompose ───────────────────────────────────────────────────────────────

fn cmd_decompose(args: &DecomposeArgs) -> Result<(), CliError> {
    // Dimensions given on the command line must agree with dimensions a
    // named file carries; a file fills in whatever the flags leave unset.
    let mut net = NetShape::default();
    if let Some(path) = &args.weights {
        let loaded = read_bnet(path)?.shape();
        for (flag, given, from_file) in [
            ("--layers", args.layers, loaded.layers),
            ("--maps", args.maps, loaded.maps_per_layer),
            ("--hidden", args.hidden, loaded.hidden),
        ] {
            if given.is_some_and(|g| g != from_file) {
                return Err(CliError::config(format!(
                    "{flag} {} contradicts the weights file ({from_file})",
                    given.unwrap()
                )));
            }
        }
        net = loaded;
    } else {
        net.layers = args.layers.unwrap_or(net.layers);
        net.maps_per_layer = args.maps.unwrap_or(net.maps_per_layer);
        net.hidden = args.hidden.unwrap_or(net.hidden);
    }

    let calib_rows = if let Some(path) = &args.calib {
        let rows = read_bmat(path)?.rows();
        if args.calib_rows.is_some_and(|g| g != rows) {
            return Err(CliError::config(format!(
                "--calib-rows {} contradicts the calibration file ({rows} rows)",
                args.calib_rows.unwrap()
            )));
        }
        rows
    } else {
        args.calib_rows.unwrap_or(256)
    };

    let path_string = |p: &PathBuf| p.display().to_string();
    let params = RunParams {
        seed: args.seed,
        n_iters: args.iters,
        k: args.rank,
        precision: args.precision.into(),
        net,
        weight_source: args
            .weights
            .as_ref()
            .map_or(WeightSource::Seeded, |p| WeightSource::File(path_string(p))),
        calib_rows,
        sort_rows: args.sort_rows,
        calib_source: args
            .calib
            .as_ref()
            .map_or(CalibSource::Seeded, |p| CalibSource::File(path_string(p))),
    };
    params.validate().map_err(CliError::config)?;

    let network = build_network(&params)?;
    let calibration = build_calibration(&params)?;
    let artifacts = decompose_model(&network, &calibration, &params)?;
    write_container(&args.out, &artifacts)?;

    println!(
        "decomposed {} weights x {} blocks (rank {}, {} precision) -> {} ({} MiB payload)",
        artifacts.stacks.len(),
        params.n_iters,
        params.k,
        precision_name(params.precision),
        args.out.display(),
        format_mib2(artifacts.total_block_bytes()),
    );
    Ok(())
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Half => "half",
        Precision::Single => "single",
    }
}

// ── sort ────────────────────────────────────────────────────────────────────

fn cmd_sort(args: &SortArgs) -> Result<(), CliError> {
    let mut artifacts = read_container(&args.input)?;
    let strategy: SortStrategy = args.strategy.into();

    let universal = match strategy {
        SortStrategy::Average | SortStrategy::Greedy => {
            let evaluator = evaluator_for(&artifacts, artifacts.params.sort_rows)?;
            let sorter = match strategy {
                SortStrategy::Average => sort_average,
                SortStrategy::Greedy => sort_greedy,
                SortStrategy::Random => unreachable!(),
            };
            sorter(&artifacts.stacks, &evaluator).map_err(HarnessError::Sort)?
        }
        SortStrategy::Random => sort_random(
            &artifacts.stacks,
            stream_seed(artifacts.params.seed, SHUFFLE_STREAM),
        ),
    };

    apply_importance(&mut artifacts.stacks, &universal);
    artifacts.order = Some(universal);
    write_container(&args.out, &artifacts)?;

    println!(
        "ordered {} blocks with the {strategy} strategy -> {}",
        artifacts.order.as_ref().map_or(0, |u| u.len()),
        args.out.display(),
    );
    Ok(())
}

// ── load-eval ───────────────────────────────────────────────────────────────

fn sorted_container(path: &Path) -> Result<ModelArtifacts, CliError> {
    let artifacts = read_container(path)?;
    if artifacts.order.is_none() {
        return Err(CliError::config(format!(
            "{} is unsorted; run `bitstack sort` on it first",
            path.display()
        )));
    }
    Ok(artifacts)
}

fn cmd_load_eval(args: &LoadEvalArgs) -> Result<(), CliError> {
    let artifacts = sorted_container(&args.input)?;
    let universal = artifacts.order.as_ref().expect("checked above");
    let rows = args.rows.unwrap_or(artifacts.params.calib_rows);
    let evaluator = evaluator_for(&artifacts, rows)?;

    let bits = artifacts.block_bits_along(&universal.order);
    let plan = resolve_budget(universal, &bits, args.budget);
    let model = load_model(&artifacts, &plan).map_err(HarnessError::Plan)?;
    let score = evaluator
        .score(model.weights())
        .map_err(|detail| CliError {
            code: "compute",
            exit: EXIT_COMPUTE,
            detail,
        })?;

    let mut levels = String::new();
    for (id, level) in &plan.per_weight_level {
        let _ = write!(levels, " {id}={level}");
    }
    println!(
        "budget:  {} bytes ({} MiB)",
        plan.budget_bytes,
        format_mib2(plan.budget_bytes)
    );
    println!(
        "loaded:  {} bytes ({} MiB), {} of {} blocks",
        plan.total_bytes,
        format_mib2(plan.total_bytes),
        plan.prefix_len,
        universal.len(),
    );
    println!("levels: {levels}");
    println!("degenerate: {}", plan.degenerate);
    println!("score:   {score:e} (on {rows} calibration rows)");
    Ok(())
}

// ── sizes ───────────────────────────────────────────────────────────────────

/// Weight shapes of widely used open-model families, the reference points
/// for the preset size table.
const PRESET_SHAPES: &[(usize, usize)] = &[
    (4096, 4096),
    (4096, 1024),
    (4096, 11008),
    (4096, 14336),
    (5120, 5120),
    (5120, 13824),
    (8192, 8192),
    (8192, 1024),
    (8192, 28672),
];

fn cmd_sizes(args: &SizesArgs) -> Result<(), CliError> {
    let mut csv = String::from("label,rows,cols,rank,block_bits,block_mib\n");
    println!("{:<12} {:>6} {:>6} {:>5} {:>12} {:>10}", "label", "rows", "cols", "rank", "bits", "MiB");

    let mut emit = |label: &str, rows: usize, cols: usize, rank: usize, bits: u64| {
        let bytes = bits.div_ceil(8);
        println!(
            "{label:<12} {rows:>6} {cols:>6} {rank:>5} {bits:>12} {:>10}",
            format_mib2(bytes)
        );
        let _ = writeln!(
            csv,
            "{label},{rows},{cols},{rank},{bits},{}",
            format_mib2(bytes)
        );
    };

    match &args.input {
        Some(path) => {
            let artifacts = read_container(path)?;
            for stack in &artifacts.stacks {
                let bits = stack
                    .blocks
                    .first()
                    .map_or(0, |b| b.size_bits);
                emit(
                    &stack.weight.to_string(),
                    stack.rows(),
                    stack.cols(),
                    artifacts.params.k,
                    bits,
                );
            }
            println!(
                "total payload: {} bytes ({} MiB) across {} blocks",
                artifacts.total_block_bytes(),
                format_mib2(artifacts.total_block_bytes()),
                artifacts.stacks.len() * artifacts.params.n_iters,
            );
        }
        None => {
            if args.rank == 0 {
                return Err(CliError::config("--rank must be at least 1"));
            }
            for &(rows, cols) in PRESET_SHAPES {
                let bits = block_size_bits(rows, cols, args.rank);
                emit("preset", rows, cols, args.rank, bits);
            }
        }
    }

    if let Some(path) = &args.csv {
        std::fs::write(path, csv)?;
    }
    Ok(())
}

// ── sweep ───────────────────────────────────────────────────────────────────

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let artifacts = sorted_container(&args.input)?;
    let rows = args.rows.unwrap_or(artifacts.params.calib_rows);
    let evaluator = evaluator_for(&artifacts, rows)?;

    let max = args.max.unwrap_or_else(|| artifacts.total_block_bytes());
    if args.min > max {
        return Err(CliError::config(format!(
            "--min {} exceeds the sweep ceiling {max}",
            args.min
        )));
    }
    let budgets: Vec<u64> = match args.stride {
        Some(0) => return Err(CliError::config("--stride must be at least 1 byte")),
        Some(stride) => (args.min..=max).step_by(stride as usize).collect(),
        None => {
            if args.points < 2 {
                return Err(CliError::config("--points must be at least 2"));
            }
            linspace_budgets(args.min, max, args.points)
        }
    };

    let sweep = budget_sweep(&artifacts, &evaluator, &budgets)?;
    std::fs::write(&args.out, sweep_csv(&sweep))?;
    if let Some(script) = &args.gnuplot {
        std::fs::write(script, gnuplot_script(&args.out, &sweep))?;
    }

    println!(
        "swept {} budgets from {} to {max} bytes (scored on {rows} rows) -> {}",
        sweep.len(),
        args.min,
        args.out.display(),
    );
    Ok(())
}

/// A minimal gnuplot script plotting score against budget from the CSV.
fn gnuplot_script(csv: &Path, rows: &[SweepRow]) -> String {
    let log_scale = rows.iter().all(|r| r.score > 0.0);
    format!(
        "# Surrogate score against byte budget.\n\
         set datafile separator ','\n\
         set xlabel 'budget (bytes)'\n\
         set ylabel 'surrogate score'\n\
         {}\
         set key off\n\
         plot '{}' every ::1 using 1:5 with linespoints\n",
        if log_scale { "set logscale y\n" } else { "" },
        csv.display()
    )
}

// ── verify ──────────────────────────────────────────────────────────────────

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let artifacts = read_container(&args.input)?;
    let params = &artifacts.params;

    println!("container: {}", args.input.display());
    println!(
        "network: {} layers x {} maps, stream width {} ({})",
        params.net.layers,
        params.net.maps_per_layer,
        params.net.hidden,
        match &params.weight_source {
            WeightSource::Seeded => format!("seed {}", params.seed),
            WeightSource::File(p) => format!("from {p}"),
        }
    );
    println!(
        "blocks: {} weights x {} iterations, rank {}, {} precision",
        artifacts.stacks.len(),
        params.n_iters,
        params.k,
        precision_name(params.precision),
    );
    println!(
        "calibration: {} rows ({} used for sorting, {})",
        params.calib_rows,
        params.sort_rows,
        match &params.calib_source {
            CalibSource::Seeded => "seeded".to_string(),
            CalibSource::File(p) => format!("from {p}"),
        }
    );
    println!(
        "payload: {} bytes ({} MiB)",
        artifacts.total_block_bytes(),
        format_mib2(artifacts.total_block_bytes()),
    );
    match &artifacts.order {
        // Deserialization already rechecked the order's invariants.
        Some(u) => println!("order: {} ({} blocks, verified)", u.strategy, u.len()),
        None => println!("order: none (canonical storage; run `bitstack sort`)"),
    }
    Ok(())
}
