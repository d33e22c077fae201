//! Lock-free parallel SGD over the interleaved stream of tensor entries and
//! network edges, followed by QR orthogonalization of the factors.
//!
//! Each epoch shuffles the ids of all observed entries and all edges into a
//! single stream, cuts it into `threads` contiguous chunks and lets every
//! worker sweep its chunk against shared parameters without locks. Parameter
//! cells are `AtomicU64` accessed with relaxed ordering: a worker may read a
//! row another worker is halfway through writing, which is the accepted
//! Hogwild trade-off for sparse data. Only worker 0 writes the core, with the
//! step scaled by the thread count. With one thread the run is fully
//! deterministic for a fixed seed.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Objective, TrainConfig, TuckerModel};
use crate::tensor::{ConstraintGraph, CoreContraction, Edge, Matrix, SparseTensor};

/// Mixed into the seed so the shuffle stream is independent of initialization.
const SHUFFLE_SALT: u64 = 0x5f3c_9d2e_a1b4_7c68;

/// Per-step hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub learning_rate: f64,
    pub lambda: f64,
    pub lambda_g: f64,
    /// Core steps are multiplied by this (one worker updates the core for all).
    pub threads: usize,
}

impl StepParams {
    pub fn from_config(config: &TrainConfig, epoch: usize) -> Self {
        StepParams {
            learning_rate: config.learning_rate_at(epoch),
            lambda: config.lambda,
            lambda_g: config.lambda_g,
            threads: config.threads,
        }
    }
}

/// Read/write access to model parameters, either exclusive or shared.
trait ParamStore {
    fn read_core(&self, out: &mut [f64]);
    fn write_core(&mut self, values: &[f64]);
    fn read_row(&self, mode: usize, i: usize, out: &mut [f64]);
    fn write_row(&mut self, mode: usize, i: usize, values: &[f64]);
}

impl ParamStore for TuckerModel {
    fn read_core(&self, out: &mut [f64]) {
        out.copy_from_slice(self.core().values());
    }

    fn write_core(&mut self, values: &[f64]) {
        self.core_mut().values_mut().copy_from_slice(values);
    }

    fn read_row(&self, mode: usize, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.factor(mode).row(i));
    }

    fn write_row(&mut self, mode: usize, i: usize, values: &[f64]) {
        self.factor_mut(mode).row_mut(i).copy_from_slice(values);
    }
}

struct AtomicMatrix {
    cols: usize,
    cells: Vec<AtomicU64>,
}

/// Parameters shared across workers for the duration of one epoch.
struct SharedModel {
    core: Vec<AtomicU64>,
    factors: Vec<AtomicMatrix>,
}

fn atomize(values: &[f64]) -> Vec<AtomicU64> {
    values.iter().map(|v| AtomicU64::new(v.to_bits())).collect()
}

#[inline]
fn load_into(cells: &[AtomicU64], out: &mut [f64]) {
    for (o, c) in out.iter_mut().zip(cells) {
        *o = f64::from_bits(c.load(Ordering::Relaxed));
    }
}

#[inline]
fn store_from(cells: &[AtomicU64], values: &[f64]) {
    for (c, v) in cells.iter().zip(values) {
        c.store(v.to_bits(), Ordering::Relaxed);
    }
}

impl SharedModel {
    fn new(model: &TuckerModel) -> Self {
        SharedModel {
            core: atomize(model.core().values()),
            factors: model
                .factors()
                .iter()
                .map(|u| AtomicMatrix {
                    cols: u.cols(),
                    cells: atomize(u.as_slice()),
                })
                .collect(),
        }
    }

    fn write_into(&self, model: &mut TuckerModel) {
        let (core, factors) = model.parts_mut();
        load_into(&self.core, core.values_mut());
        for (dst, src) in factors.iter_mut().zip(&self.factors) {
            load_into(&src.cells, dst.as_mut_slice());
        }
    }
}

/// A worker's handle onto the shared parameters.
struct SharedHandle<'a>(&'a SharedModel);

impl ParamStore for SharedHandle<'_> {
    fn read_core(&self, out: &mut [f64]) {
        load_into(&self.0.core, out);
    }

    fn write_core(&mut self, values: &[f64]) {
        store_from(&self.0.core, values);
    }

    fn read_row(&self, mode: usize, i: usize, out: &mut [f64]) {
        let m = &self.0.factors[mode];
        load_into(&m.cells[i * m.cols..(i + 1) * m.cols], out);
    }

    fn write_row(&mut self, mode: usize, i: usize, values: &[f64]) {
        let m = &self.0.factors[mode];
        store_from(&m.cells[i * m.cols..(i + 1) * m.cols], values);
    }
}

/// Per-worker buffers reused across updates.
struct Scratch {
    core_dims: Vec<usize>,
    core: Vec<f64>,
    rows: Vec<Vec<f64>>,
    contraction: CoreContraction,
    edge: [Vec<f64>; 2],
}

impl Scratch {
    fn new(core_dims: &[usize], constrained_cols: usize) -> Self {
        Scratch {
            core_dims: core_dims.to_vec(),
            core: vec![0.0; core_dims.iter().product()],
            rows: core_dims.iter().map(|&j| vec![0.0; j]).collect(),
            contraction: CoreContraction::new(core_dims),
            edge: [vec![0.0; constrained_cols], vec![0.0; constrained_cols]],
        }
    }

    /// Snapshots the core and the entry's rows, then evaluates the
    /// reconstruction and all gradient directions in one pass.
    fn load_entry<S: ParamStore>(&mut self, store: &S, index: &[u32]) {
        store.read_core(&mut self.core);
        for (n, &i) in index.iter().enumerate() {
            store.read_row(n, i as usize, &mut self.rows[n]);
        }
        self.contraction.compute(&self.core, &self.core_dims, &self.rows);
    }
}

/// Per-sample gradient of the objective at one observed entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryGradient {
    pub reconstruction: f64,
    /// Gradient with respect to the selected row of each mode.
    pub rows: Vec<Vec<f64>>,
    /// Gradient with respect to the linearized core.
    pub core: Vec<f64>,
}

fn entry_row_counts(x: &SparseTensor, index: &[u32]) -> Result<Vec<f64>> {
    index
        .iter()
        .enumerate()
        .map(|(n, &i)| match x.row_count(n, i as usize) {
            0 => Err(Error::Argument(format!(
                "entity {} of mode {} has no observed entries",
                i + 1,
                n + 1
            ))),
            c => Ok(c as f64),
        })
        .collect()
}

fn to_u32_index(model: &TuckerModel, index: &[usize]) -> Result<Vec<u32>> {
    let idx: Vec<u32> = index.iter().map(|&i| i.min(u32::MAX as usize) as u32).collect();
    model.check_index(&idx)?;
    Ok(idx)
}

/// Analytic gradient of the per-sample loss
/// `½[(x − x̃)² + λ‖G‖²/|Ω| + λ Σ_n ‖u_{i_n}‖²/|Ω^{n,i_n}|]`.
pub fn entry_gradient(model: &TuckerModel, x: &SparseTensor, e: usize, lambda: f64) -> Result<EntryGradient> {
    let index = x.index(e);
    model.check_index(index)?;
    let counts = entry_row_counts(x, index)?;
    let mut s = Scratch::new(model.core_dims(), 0);
    s.load_entry(model, index);
    let residual = s.contraction.reconstruction - x.value(e);
    let rows = s
        .rows
        .iter()
        .zip(&s.contraction.mode_gradients)
        .zip(&counts)
        .map(|((row, g), &c)| {
            row.iter()
                .zip(g)
                .map(|(&u, &gj)| residual * gj + lambda / c * u)
                .collect()
        })
        .collect();
    let omega = x.nnz() as f64;
    let core = s
        .core
        .iter()
        .zip(&s.contraction.outer)
        .map(|(&g, &o)| residual * o + lambda / omega * g)
        .collect();
    Ok(EntryGradient {
        reconstruction: s.contraction.reconstruction,
        rows,
        core,
    })
}

/// Gradients of `½ λ_g y ‖u_{k1} − u_{k2}‖²` with respect to both rows.
pub fn edge_gradient(model: &TuckerModel, mode: usize, edge: &Edge, lambda_g: f64) -> (Vec<f64>, Vec<f64>) {
    let u = model.factor(mode);
    let a = u.row(edge.a as usize);
    let b = u.row(edge.b as usize);
    let scale = lambda_g * edge.weight;
    (
        a.iter().zip(b).map(|(p, q)| scale * (p - q)).collect(),
        a.iter().zip(b).map(|(p, q)| scale * (q - p)).collect(),
    )
}

#[allow(clippy::too_many_arguments)]
fn apply_entry<S: ParamStore>(
    store: &mut S,
    s: &mut Scratch,
    x: &SparseTensor,
    e: usize,
    params: &StepParams,
    omega: f64,
    is_core_updater: bool,
) {
    let index = x.index(e);
    s.load_entry(store, index);
    let residual = s.contraction.reconstruction - x.value(e);
    let eta = params.learning_rate;
    for (n, &i) in index.iter().enumerate() {
        let count = x.row_count(n, i as usize) as f64;
        let shrink = params.lambda / count;
        let row = &mut s.rows[n];
        for (u, &g) in row.iter_mut().zip(&s.contraction.mode_gradients[n]) {
            *u -= eta * (residual * g + shrink * *u);
        }
        store.write_row(n, i as usize, row);
    }
    if is_core_updater {
        let step = eta * params.threads as f64;
        let shrink = params.lambda / omega;
        for (g, &o) in s.core.iter_mut().zip(&s.contraction.outer) {
            *g -= step * (residual * o + shrink * *g);
        }
        store.write_core(&s.core);
    }
}

fn apply_edge<S: ParamStore>(store: &mut S, s: &mut Scratch, mode: usize, edge: &Edge, params: &StepParams) {
    let (a, b) = (edge.a as usize, edge.b as usize);
    let [s1, s2] = &mut s.edge;
    store.read_row(mode, a, s1);
    store.read_row(mode, b, s2);
    let step = params.learning_rate * params.lambda_g * edge.weight;
    for (p, q) in s1.iter_mut().zip(s2.iter_mut()) {
        let d = *p - *q;
        *p -= step * d;
        *q += step * d;
    }
    store.write_row(mode, a, s1);
    store.write_row(mode, b, s2);
}

/// One SGD step on an observed entry of `x` at the 0-based `index`.
///
/// Every row gradient and the core gradient are taken at the same
/// pre-update snapshot. The core moves only when `is_core_updater`, by
/// `η·P` times its gradient.
pub fn update_from_tensor_entry(
    model: &mut TuckerModel,
    x: &SparseTensor,
    index: &[usize],
    params: &StepParams,
    is_core_updater: bool,
) -> Result<()> {
    let idx = to_u32_index(model, index)?;
    entry_row_counts(x, &idx)?;
    let e = (0..x.nnz())
        .find(|&e| x.index(e) == idx.as_slice())
        .ok_or_else(|| Error::Argument(format!("index {index:?} is not an observed entry")))?;
    let mut s = Scratch::new(model.core_dims(), 0);
    apply_entry(model, &mut s, x, e, params, x.nnz() as f64, is_core_updater);
    Ok(())
}

/// Pulls the two endpoint rows of `edge` in `mode` toward each other
/// using snapshots of both.
pub fn update_from_network_edge(model: &mut TuckerModel, mode: usize, edge: &Edge, params: &StepParams) -> Result<()> {
    if mode >= model.order() {
        return Err(Error::Index(format!("mode {} out of range", mode + 1)));
    }
    let rows = model.factor(mode).rows();
    for k in [edge.a, edge.b] {
        if k as usize >= rows {
            return Err(Error::Index(format!(
                "node {} out of range 1..={rows} in mode {}",
                k + 1,
                mode + 1
            )));
        }
    }
    let cols = model.factor(mode).cols();
    let mut s = Scratch::new(&[], cols);
    apply_edge(model, &mut s, mode, edge, params);
    Ok(())
}

/// One completed epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub objective: Objective,
    /// Wall time of the SGD sweep.
    pub seconds: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,f,f_g,f_opt,seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.objective.f, self.objective.f_g, self.objective.f_opt, self.seconds
        )
    }
}

/// Writes the metrics header followed by one row per record.
pub fn write_metrics<W: Write>(out: &mut W, trace: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "{}", EpochRecord::CSV_HEADER)?;
    for r in trace {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub trace: Vec<EpochRecord>,
    pub converged: bool,
    /// Modes (0-based) whose factor was rank deficient at orthogonalization.
    pub rank_deficient_modes: Vec<usize>,
}

impl TrainReport {
    pub fn final_objective(&self) -> Option<Objective> {
        self.trace.last().map(|r| r.objective)
    }
}

fn run_chunk<S: ParamStore>(
    store: &mut S,
    scratch: &mut Scratch,
    chunk: &[u32],
    x: &SparseTensor,
    graph: &ConstraintGraph,
    params: &StepParams,
    is_core_updater: bool,
) {
    let nnz = x.nnz();
    let omega = nnz as f64;
    for &id in chunk {
        let id = id as usize;
        if id < nnz {
            apply_entry(store, scratch, x, id, params, omega, is_core_updater);
        } else {
            apply_edge(store, scratch, graph.mode(), &graph.edges()[id - nnz], params);
        }
    }
}

fn check_training_inputs(model: &TuckerModel, x: &SparseTensor, graph: &ConstraintGraph, config: &TrainConfig) -> Result<()> {
    let dims = model.dims();
    config.validate(&dims)?;
    if model.core_dims() != config.core_dims.as_slice() {
        return Err(Error::Config(format!(
            "model core {:?} differs from configured core {:?}",
            model.core_dims(),
            config.core_dims
        )));
    }
    if x.dims() != dims.as_slice() {
        return Err(Error::shape(
            None,
            format!("tensor dims {:?} differ from model dims {:?}", x.dims(), dims),
        ));
    }
    if graph.mode() != config.constrained_mode {
        return Err(Error::Config(format!(
            "graph constrains mode {} but the configuration names mode {}",
            graph.mode() + 1,
            config.constrained_mode + 1
        )));
    }
    if graph.node_count() != dims[graph.mode()] {
        return Err(Error::shape(
            Some(graph.mode()),
            format!(
                "graph has {} nodes, mode has {} entities",
                graph.node_count(),
                dims[graph.mode()]
            ),
        ));
    }
    let stream = x.nnz() + graph.len();
    if stream > u32::MAX as usize {
        return Err(Error::Argument(format!("training stream of {stream} items exceeds u32 range")));
    }
    Ok(())
}

/// Trains `model` in place; see [`train_with`].
pub fn train(model: &mut TuckerModel, x: &SparseTensor, graph: &ConstraintGraph, config: &TrainConfig) -> Result<TrainReport> {
    train_with(model, x, graph, config, |_| {})
}

/// Runs SGD epochs until the relative change of `f_opt` drops below the
/// tolerance or `max_epochs` is reached, then orthogonalizes the factors.
/// `on_epoch` sees each record as soon as the epoch's objective is known.
pub fn train_with<F>(
    model: &mut TuckerModel,
    x: &SparseTensor,
    graph: &ConstraintGraph,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&EpochRecord),
{
    check_training_inputs(model, x, graph, config)?;
    let threads = config.threads;
    let constrained_cols = model.core_dims()[graph.mode()];
    let mut order: Vec<u32> = (0..(x.nnz() + graph.len()) as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut scratch: Vec<Scratch> = (0..threads)
        .map(|_| Scratch::new(model.core_dims(), constrained_cols))
        .collect();

    let mut previous = model.objective(x, graph, config)?.f_opt;
    let mut trace = Vec::new();
    let mut converged = false;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let params = StepParams::from_config(config, epoch);
        let start = Instant::now();
        if threads == 1 {
            run_chunk(model, &mut scratch[0], &order, x, graph, &params, true);
        } else {
            let shared = SharedModel::new(model);
            let chunk_len = order.len().div_ceil(threads).max(1);
            std::thread::scope(|scope| {
                for (worker, (chunk, s)) in order.chunks(chunk_len).zip(scratch.iter_mut()).enumerate() {
                    let shared = &shared;
                    let params = &params;
                    scope.spawn(move || {
                        let mut handle = SharedHandle(shared);
                        run_chunk(&mut handle, s, chunk, x, graph, params, worker == 0);
                    });
                }
            });
            shared.write_into(model);
        }
        let seconds = start.elapsed().as_secs_f64();

        if !model.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                learning_rate: params.learning_rate,
            });
        }
        let objective = model.objective(x, graph, config)?;
        if !objective.f_opt.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                learning_rate: params.learning_rate,
            });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            objective,
            seconds,
        };
        debug!("epoch {} f_opt {} ({:.3}s)", record.epoch, objective.f_opt, seconds);
        on_epoch(&record);
        trace.push(record);

        let change = (previous - objective.f_opt).abs() / objective.f_opt.abs().max(f64::MIN_POSITIVE);
        previous = objective.f_opt;
        if change < config.tolerance {
            converged = true;
            break;
        }
    }

    let rank_deficient_modes = orthogonalize(model)?;
    Ok(TrainReport {
        epochs_run: trace.len(),
        trace,
        converged,
        rank_deficient_modes,
    })
}

/// Relative size below which an `R` diagonal entry counts as zero.
const RANK_TOLERANCE: f64 = 1e-12;

/// Replaces every factor `U` by `Q` from its thin QR decomposition (with a
/// nonnegative `R` diagonal) and folds `R` into the core as `G ×_n R`, so
/// every reconstructed value is unchanged.
///
/// Returns the modes whose factor was rank deficient; those are still
/// orthogonalized and still reconstruct exactly.
pub fn orthogonalize(model: &mut TuckerModel) -> Result<Vec<usize>> {
    let mut deficient = Vec::new();
    for n in 0..model.order() {
        let u = model.factor(n);
        let (rows, cols) = (u.rows(), u.cols());
        if rows < cols {
            return Err(Error::shape(
                Some(n),
                format!("factor is {rows}x{cols}; QR needs at least as many rows as columns"),
            ));
        }
        let qr = DMatrix::from_row_slice(rows, cols, u.as_slice()).qr();
        let mut q = qr.q();
        let mut r = qr.r();
        for j in 0..cols {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
                r.row_mut(j).neg_mut();
            }
        }
        let scale = (0..cols).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
        if (0..cols).any(|j| r[(j, j)].abs() <= RANK_TOLERANCE * scale.max(f64::MIN_POSITIVE)) {
            warn!("factor of mode {} is rank deficient; R has a zero diagonal entry", n + 1);
            deficient.push(n);
        }
        let q_rows: Vec<f64> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|ij| q[ij]).collect();
        let r_rows: Vec<f64> = (0..cols).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|ij| r[ij]).collect();
        let r = Matrix::from_vec(cols, cols, r_rows)?;
        let core = model.core().mode_n_product(&r, n)?;
        *model.core_mut() = core;
        *model.factor_mut(n) = Matrix::from_vec(rows, cols, q_rows)?;
    }
    Ok(deficient)
}
