//! Command-line front end. [`run`] parses `argv`, dispatches a subcommand
//! and returns the process exit code; all output goes to the given writers.
//!
//! Entity and mode numbers on the command line and in output are 1-based.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cluster::{gap_statistic, kmeans, DEFAULT_MAX_ITERS};
use crate::engine::{train_with, write_metrics, EpochRecord};
use crate::error::{Error, Result};
use crate::io::{load_model, load_network, load_query, load_sparse_tensor, normalize_slices, save_model, save_sparse_tensor};
use crate::model::{TrainConfig, TuckerModel};
use crate::query::{fold_in, subtype_matrix, top_k, FoldInOptions};
use crate::tensor::{ConstraintGraph, SparseTensor};

#[derive(Debug, Parser)]
#[command(name = "nctucker", version, about = "Network-constrained sparse Tucker decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Min-max and Frobenius normalize each slice of a tensor file.
    Preprocess(PreprocessArgs),
    /// Fit a model and print per-epoch metrics as CSV.
    Train(TrainArgs),
    /// Fold in a new entity and list its nearest mode-1 entities.
    Query(QueryArgs),
    /// Cluster the rows of a factor matrix.
    Cluster(ClusterArgs),
    /// Print the personalized subtype matrix of one entity.
    Subtype(SubtypeArgs),
    /// Evaluate a saved model on a tensor.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3)]
    slice_mode: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    tensor: PathBuf,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    constrained_mode: usize,
    /// Comma-separated core sizes, one per mode.
    #[arg(long, value_delimiter = ',', required = true)]
    core_size: Vec<usize>,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_g: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    model_out: PathBuf,
    /// Also write the metrics CSV to this file.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    fold_in_epochs: usize,
    #[arg(long, default_value_t = 0.0)]
    lr_decay: f64,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    query_file: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    fold_in: FoldInFlags,
}

/// Fold-in overrides; unset values come from the saved training config.
#[derive(Debug, Args)]
struct FoldInFlags {
    #[arg(long)]
    fold_in_lr: Option<f64>,
    #[arg(long)]
    fold_in_epochs: Option<usize>,
}

impl FoldInFlags {
    fn options(&self, config: &TrainConfig) -> Result<FoldInOptions> {
        let mut opts = FoldInOptions::from(config);
        if let Some(lr) = self.fold_in_lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Argument(format!("--fold-in-lr {lr} must be positive")));
            }
            opts.learning_rate = lr;
        }
        if let Some(epochs) = self.fold_in_epochs {
            if epochs == 0 {
                return Err(Error::Argument("--fold-in-epochs must be at least 1".into()));
            }
            opts.epochs = epochs;
        }
        Ok(opts)
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("count").required(true).args(["k", "gap_kmax"]))]
struct ClusterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1)]
    mode: usize,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    gap_kmax: Option<usize>,
    #[arg(long, default_value_t = 1)]
    gap_kmin: usize,
    #[arg(long = "gap-B", default_value_t = 10)]
    gap_b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    max_iters: usize,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("subject").required(true).args(["entity", "query_file"]))]
struct SubtypeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    entity: Option<usize>,
    #[arg(long)]
    query_file: Option<PathBuf>,
    #[command(flatten)]
    fold_in: FoldInFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tensor: PathBuf,
    #[arg(long)]
    network: Option<PathBuf>,
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// code: 0 on success, 2 on a usage error, 1 on any other failure.
pub fn run<I, T, O, E>(argv: I, out: &mut O, err: &mut E) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
    O: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train_cmd(a, out),
        Command::Query(a) => query_cmd(a, out),
        Command::Cluster(a) => cluster_cmd(a, out, err),
        Command::Subtype(a) => subtype_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
    };
    match result.and_then(|()| out.flush().map_err(Error::from)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn mode_arg(mode: usize, order: usize, flag: &str) -> Result<usize> {
    if mode == 0 || mode > order {
        return Err(Error::Argument(format!("--{flag} {mode} outside 1..={order}")));
    }
    Ok(mode - 1)
}

fn entity_arg(entity: usize, count: usize) -> Result<usize> {
    if entity == 0 || entity > count {
        return Err(Error::Argument(format!("--entity {entity} outside 1..={count}")));
    }
    Ok(entity - 1)
}

fn graph_for(path: Option<&Path>, x_dims: &[usize], mode: usize) -> Result<ConstraintGraph> {
    match path {
        Some(p) => load_network(p, x_dims[mode], mode),
        None => Ok(ConstraintGraph::new(x_dims[mode], mode)),
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let x = load_sparse_tensor(&a.input)?;
    let mode = mode_arg(a.slice_mode, x.order(), "slice-mode")?;
    save_sparse_tensor(&normalize_slices(&x, mode)?, &a.output)
}

fn train_cmd<O: Write>(a: TrainArgs, out: &mut O) -> Result<()> {
    let x = load_sparse_tensor(&a.tensor)?;
    let constrained = mode_arg(a.constrained_mode, x.order(), "constrained-mode")?;
    let config = TrainConfig {
        core_dims: a.core_size,
        learning_rate: a.lr,
        lambda: a.lambda,
        lambda_g: a.lambda_g,
        threads: a.threads,
        constrained_mode: constrained,
        max_epochs: a.epochs,
        tolerance: a.tol,
        seed: a.seed,
        fold_in_epochs: a.fold_in_epochs,
        lr_decay: a.lr_decay,
        fold_in_ridge: 0.0,
    };
    config.validate(x.dims())?;
    let graph = graph_for(a.network.as_deref(), x.dims(), constrained)?;
    let mut model = TuckerModel::init_random(x.dims(), &config)?;

    writeln!(out, "{}", EpochRecord::CSV_HEADER)?;
    let mut write_err = None;
    let report = train_with(&mut model, &x, &graph, &config, |r| {
        if write_err.is_none() {
            write_err = writeln!(out, "{}", r.csv_row()).and_then(|()| out.flush()).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(path) = &a.metrics_out {
        let mut w = BufWriter::new(File::create(path)?);
        write_metrics(&mut w, &report.trace)?;
        w.flush()?;
    }
    if !report.converged {
        log::info!("stopped after {} epochs without meeting the tolerance", report.epochs_run);
    }
    save_model(&model, &config, &a.model_out)
}

fn query_cmd<O: Write>(a: QueryArgs, out: &mut O) -> Result<()> {
    let archive = load_model(&a.model)?;
    let model = &archive.model;
    let query = load_query(&a.query_file, &model.dims())?;
    let row = fold_in(model, &query, &a.fold_in.options(&archive.config)?)?;
    writeln!(out, "fold_in,{}", join(&row))?;
    writeln!(out, "rank,entity,distance")?;
    for (rank, n) in top_k(model, &row, a.k)?.iter().enumerate() {
        writeln!(out, "{},{},{}", rank + 1, n.entity + 1, n.distance)?;
    }
    Ok(())
}

fn cluster_cmd<O: Write, E: Write>(a: ClusterArgs, out: &mut O, err: &mut E) -> Result<()> {
    let archive = load_model(&a.model)?;
    let mode = mode_arg(a.mode, archive.model.order(), "mode")?;
    let rows = archive.model.factor(mode);
    let k = match (a.k, a.gap_kmax) {
        (Some(k), _) => k,
        (None, Some(k_max)) => {
            let gap = gap_statistic(rows, a.gap_kmin, k_max, a.gap_b, a.seed)?;
            writeln!(err, "k,gap,standard_error,log_dispersion")?;
            for g in &gap.entries {
                writeln!(err, "{},{},{},{}", g.k, g.gap, g.standard_error, g.log_dispersion)?;
            }
            writeln!(err, "selected k = {}", gap.selected_k)?;
            gap.selected_k
        }
        (None, None) => unreachable!("clap requires --k or --gap-kmax"),
    };
    let fit = kmeans(rows, k, a.seed, a.max_iters)?;
    writeln!(out, "entity,cluster")?;
    for (i, c) in fit.assignments.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, c + 1)?;
    }
    Ok(())
}

fn subtype_cmd<O: Write>(a: SubtypeArgs, out: &mut O) -> Result<()> {
    let archive = load_model(&a.model)?;
    let model = &archive.model;
    let u = match (a.entity, &a.query_file) {
        (Some(e), _) => model.factor(0).row(entity_arg(e, model.dims()[0])?).to_vec(),
        (None, Some(path)) => fold_in(model, &load_query(path, &model.dims())?, &a.fold_in.options(&archive.config)?)?,
        (None, None) => unreachable!("clap requires --entity or --query-file"),
    };
    let sub = subtype_matrix(model, &u)?;
    let header: Vec<String> = (1..=sub.s.cols()).map(|c| format!("s_{c}")).collect();
    writeln!(out, "# subtype matrix")?;
    writeln!(out, "row,{}", header.join(","))?;
    for (r, row) in sub.s.iter_rows().enumerate() {
        writeln!(out, "{},{}", r + 1, join(row))?;
    }
    writeln!(out, "# row influence")?;
    writeln!(out, "row,influence")?;
    for (r, v) in sub.row_influence.iter().enumerate() {
        writeln!(out, "{},{v}", r + 1)?;
    }
    writeln!(out, "# platform influence")?;
    writeln!(out, "platform,influence")?;
    for (p, v) in sub.platform_influence.iter().enumerate() {
        writeln!(out, "{},{v}", p + 1)?;
    }
    Ok(())
}

fn eval_cmd<O: Write>(a: EvalArgs, out: &mut O) -> Result<()> {
    let archive = load_model(&a.model)?;
    let x: SparseTensor = load_sparse_tensor(&a.tensor)?;
    if x.dims() != archive.model.dims().as_slice() {
        return Err(Error::shape(
            None,
            format!("tensor dims {:?} differ from model dims {:?}", x.dims(), archive.model.dims()),
        ));
    }
    let c = archive.config.constrained_mode;
    let graph = graph_for(a.network.as_deref(), x.dims(), c)?;
    let obj = archive.model.objective(&x, &graph, &archive.config)?;
    let rmse = archive.model.rmse(&x)?;
    writeln!(out, "f,f_g,f_opt,rmse")?;
    writeln!(out, "{},{},{},{rmse}", obj.f, obj.f_g, obj.f_opt)?;
    Ok(())
}
