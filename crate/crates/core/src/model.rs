//! The Tucker model, its hyperparameters, and objective evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConstraintGraph, CoreContraction, DenseTensor, Edge, FrobeniusNorm, Matrix, SparseTensor};

/// Core tensor plus one factor matrix per mode; `factors[n]` is `I_n × J_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerModel {
    core: DenseTensor,
    factors: Vec<Matrix>,
}

/// Training hyperparameters. Mode indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub core_dims: Vec<usize>,
    pub learning_rate: f64,
    pub lambda: f64,
    pub lambda_g: f64,
    pub threads: usize,
    pub constrained_mode: usize,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub fold_in_epochs: usize,
    /// Step size at epoch `t` is `learning_rate / (1 + lr_decay * t)`.
    #[serde(default)]
    pub lr_decay: f64,
    /// Optional L2 penalty on folded-in rows.
    #[serde(default)]
    pub fold_in_ridge: f64,
}

impl TrainConfig {
    pub fn new(core_dims: Vec<usize>) -> Self {
        TrainConfig {
            core_dims,
            learning_rate: 0.01,
            lambda: 1e-3,
            lambda_g: 0.0,
            threads: 1,
            constrained_mode: 1,
            max_epochs: 100,
            tolerance: 1e-4,
            seed: 0,
            fold_in_epochs: 50,
            lr_decay: 0.0,
            fold_in_ridge: 0.0,
        }
    }

    /// Checks the configuration against the data tensor's dims.
    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        if self.core_dims.len() != dims.len() {
            return Err(Error::Config(format!(
                "core has {} modes but the tensor has {}",
                self.core_dims.len(),
                dims.len()
            )));
        }
        for (n, (&j, &i)) in self.core_dims.iter().zip(dims).enumerate() {
            if j == 0 || j > i {
                return Err(Error::Config(format!(
                    "core size {j} in mode {} must be within 1..={i}",
                    n + 1
                )));
            }
        }
        if self.constrained_mode >= dims.len() {
            return Err(Error::Config(format!(
                "constrained mode {} outside 1..={}",
                self.constrained_mode + 1,
                dims.len()
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !nonneg(self.lambda) || !nonneg(self.lambda_g) || !nonneg(self.lr_decay) || !nonneg(self.fold_in_ridge) {
            return Err(Error::Config(
                "lambda, lambda_g, lr_decay and fold_in_ridge must be nonnegative".into(),
            ));
        }
        if !positive(self.tolerance) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if self.threads == 0 || self.max_epochs == 0 || self.fold_in_epochs == 0 {
            return Err(Error::Config(
                "threads, max_epochs and fold_in_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * epoch as f64)
    }
}

/// The three objective components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// Reconstruction error plus L2 regularization.
    pub f: f64,
    /// Network penalty, unscaled by `lambda_g`.
    pub f_g: f64,
    /// `f + lambda_g * f_g`.
    pub f_opt: f64,
}

impl TuckerModel {
    pub fn new(core: DenseTensor, factors: Vec<Matrix>) -> Result<Self> {
        if factors.len() != core.order() {
            return Err(Error::shape(
                None,
                format!("{} factors for a {}-mode core", factors.len(), core.order()),
            ));
        }
        for (n, (u, &j)) in factors.iter().zip(core.dims()).enumerate() {
            if u.cols() != j {
                return Err(Error::shape(
                    Some(n),
                    format!("factor has {} columns, core mode has size {j}", u.cols()),
                ));
            }
            if u.rows() == 0 {
                return Err(Error::shape(Some(n), "factor has no rows"));
            }
        }
        Ok(TuckerModel { core, factors })
    }

    /// Draws every core and factor entry uniformly from `[0, 1/√J_max)`.
    pub fn init_random(dims: &[usize], config: &TrainConfig) -> Result<Self> {
        config.validate(dims)?;
        let j_max = *config.core_dims.iter().max().expect("validated nonempty") as f64;
        let bound = 1.0 / j_max.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let core_len = config.core_dims.iter().product();
        let core_values = (0..core_len).map(|_| rng.gen_range(0.0..bound)).collect();
        let core = DenseTensor::new(config.core_dims.clone(), core_values)?;
        let factors = dims
            .iter()
            .zip(&config.core_dims)
            .map(|(&i, &j)| {
                let data = (0..i * j).map(|_| rng.gen_range(0.0..bound)).collect();
                Matrix::from_vec(i, j, data)
            })
            .collect::<Result<Vec<_>>>()?;
        TuckerModel::new(core, factors)
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    pub fn core_dims(&self) -> &[usize] {
        self.core.dims()
    }

    pub fn core(&self) -> &DenseTensor {
        &self.core
    }

    pub fn core_mut(&mut self) -> &mut DenseTensor {
        &mut self.core
    }

    pub fn factor(&self, n: usize) -> &Matrix {
        &self.factors[n]
    }

    pub fn factor_mut(&mut self, n: usize) -> &mut Matrix {
        &mut self.factors[n]
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut DenseTensor, &mut [Matrix]) {
        (&mut self.core, &mut self.factors)
    }

    pub fn check_index<I: Copy + Into<u64>>(&self, index: &[I]) -> Result<()> {
        if index.len() != self.order() {
            return Err(Error::Index(format!(
                "index has {} components, model has {} modes",
                index.len(),
                self.order()
            )));
        }
        for (n, (&i, u)) in index.iter().zip(&self.factors).enumerate() {
            let i: u64 = i.into();
            if i >= u.rows() as u64 {
                return Err(Error::Index(format!(
                    "index {} out of range 1..={} in mode {}",
                    i + 1,
                    u.rows(),
                    n + 1
                )));
            }
        }
        Ok(())
    }

    /// Reconstructed value at a 0-based index.
    pub fn reconstruct_entry(&self, index: &[usize]) -> Result<f64> {
        let idx: Vec<u64> = index.iter().map(|&i| i as u64).collect();
        self.check_index(&idx)?;
        let rows: Vec<&[f64]> = index
            .iter()
            .zip(&self.factors)
            .map(|(&i, u)| u.row(i))
            .collect();
        let mut c = CoreContraction::new(self.core.dims());
        c.compute(self.core.values(), self.core.dims(), &rows);
        Ok(c.reconstruction)
    }

    fn reconstruct_with(&self, index: &[u32], scratch: &mut CoreContraction) -> f64 {
        let rows: Vec<&[f64]> = index
            .iter()
            .zip(&self.factors)
            .map(|(&i, u)| u.row(i as usize))
            .collect();
        scratch.compute(self.core.values(), self.core.dims(), &rows);
        scratch.reconstruction
    }

    fn check_data(&self, x: &SparseTensor) -> Result<()> {
        if x.dims() != self.dims().as_slice() {
            return Err(Error::shape(
                None,
                format!("tensor dims {:?} differ from model dims {:?}", x.dims(), self.dims()),
            ));
        }
        Ok(())
    }

    fn check_graph(&self, graph: &ConstraintGraph) -> Result<()> {
        let mode = graph.mode();
        if mode >= self.order() {
            return Err(Error::Config(format!(
                "graph constrains mode {} of a {}-mode model",
                mode + 1,
                self.order()
            )));
        }
        if graph.node_count() != self.factors[mode].rows() {
            return Err(Error::shape(
                Some(mode),
                format!(
                    "graph has {} nodes, mode has {} entities",
                    graph.node_count(),
                    self.factors[mode].rows()
                ),
            ));
        }
        Ok(())
    }

    /// `½ Σ_{Ω_Y} y ‖u_{k1} − u_{k2}‖²` over rows of the graph's mode.
    pub fn network_penalty(&self, graph: &ConstraintGraph) -> Result<f64> {
        self.check_graph(graph)?;
        let u = &self.factors[graph.mode()];
        Ok(graph.edges().iter().map(|e| edge_term(u, e)).fold(0.0, |acc, t| acc + t) * 0.5)
    }

    /// Batch objective: squared error over observed entries, L2 on the core
    /// and on every observed factor row, and the network penalty.
    ///
    /// Rows never observed carry no L2 term, matching what SGD optimizes. For
    /// the same reason the core carries none when the tensor is empty.
    pub fn objective(&self, x: &SparseTensor, graph: &ConstraintGraph, config: &TrainConfig) -> Result<Objective> {
        self.check_data(x)?;
        let mut scratch = CoreContraction::new(self.core.dims());
        let sse: f64 = x
            .entries()
            .map(|(idx, v)| {
                let r = v - self.reconstruct_with(idx, &mut scratch);
                r * r
            })
            .sum();
        let mut reg = 0.0;
        if !x.is_empty() {
            reg += self.core.frobenius_norm().powi(2);
        }
        for (n, u) in self.factors.iter().enumerate() {
            reg += u
                .iter_rows()
                .zip(x.row_counts(n))
                .filter(|(_, &c)| c > 0)
                .map(|(row, _)| row.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>();
        }
        let f = 0.5 * sse + 0.5 * config.lambda * reg;
        let f_g = self.network_penalty(graph)?;
        Ok(Objective {
            f,
            f_g,
            f_opt: f + config.lambda_g * f_g,
        })
    }

    /// Loss contributed by entry `e` in the per-sample decomposition of `f`:
    /// `½[(x − x̃)² + λ‖G‖²/|Ω| + λ Σ_n ‖u_{i_n}‖²/|Ω^{n,i_n}|]`.
    pub fn sample_loss(&self, x: &SparseTensor, e: usize, lambda: f64) -> f64 {
        let idx = x.index(e);
        let mut scratch = CoreContraction::new(self.core.dims());
        let r = x.value(e) - self.reconstruct_with(idx, &mut scratch);
        let mut reg = self.core.frobenius_norm().powi(2) / x.nnz() as f64;
        for (n, &i) in idx.iter().enumerate() {
            let row = self.factors[n].row(i as usize);
            reg += row.iter().map(|v| v * v).sum::<f64>() / x.row_count(n, i as usize) as f64;
        }
        0.5 * (r * r + lambda * reg)
    }

    /// Loss contributed by one edge: `½ λ_g y ‖u_{k1} − u_{k2}‖²`.
    pub fn edge_loss(&self, mode: usize, edge: &Edge, lambda_g: f64) -> f64 {
        0.5 * lambda_g * edge_term(&self.factors[mode], edge)
    }

    /// The objective assembled by summing [`sample_loss`](Self::sample_loss)
    /// and [`edge_loss`](Self::edge_loss) over the training stream.
    pub fn per_sample_objective(&self, x: &SparseTensor, graph: &ConstraintGraph, config: &TrainConfig) -> Result<Objective> {
        self.check_data(x)?;
        self.check_graph(graph)?;
        let f: f64 = (0..x.nnz()).map(|e| self.sample_loss(x, e, config.lambda)).sum();
        let f_g: f64 = graph
            .edges()
            .iter()
            .map(|e| self.edge_loss(graph.mode(), e, 1.0))
            .fold(0.0, |acc, t| acc + t);
        Ok(Objective {
            f,
            f_g,
            f_opt: f + config.lambda_g * f_g,
        })
    }

    /// Root-mean-square reconstruction error over the stored entries of `x`.
    pub fn rmse(&self, x: &SparseTensor) -> Result<f64> {
        self.check_data(x)?;
        if x.is_empty() {
            return Ok(0.0);
        }
        let mut scratch = CoreContraction::new(self.core.dims());
        let sse: f64 = x
            .entries()
            .map(|(idx, v)| (v - self.reconstruct_with(idx, &mut scratch)).powi(2))
            .sum();
        Ok((sse / x.nnz() as f64).sqrt())
    }

    /// `‖x − x̃‖ / ‖x‖` over the stored entries of `x`.
    pub fn relative_error(&self, x: &SparseTensor) -> Result<f64> {
        let norm = x.frobenius_norm();
        let rmse = self.rmse(x)?;
        let err = rmse * (x.nnz() as f64).sqrt();
        Ok(if norm > 0.0 { err / norm } else { err })
    }

    pub fn is_finite(&self) -> bool {
        self.core.values().iter().all(|v| v.is_finite())
            && self
                .factors
                .iter()
                .all(|u| u.as_slice().iter().all(|v| v.is_finite()))
    }
}

fn edge_term(u: &Matrix, e: &Edge) -> f64 {
    let a = u.row(e.a as usize);
    let b = u.row(e.b as usize);
    e.weight
        * a.iter()
            .zip(b)
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
}
