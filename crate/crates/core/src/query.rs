//! Queries against a trained model: fold-in of new mode-1 entities,
//! nearest-neighbor search over their latent rows, and subtype matrices.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{TrainConfig, TuckerModel};
use crate::tensor::{mode_gradient_vector, DenseTensor, Matrix};

/// Observed values of one new mode-1 entity, indexed over modes `1..N`
/// (0-based, one index per non-query mode).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySlice {
    entries: Vec<(Vec<usize>, f64)>,
}

impl QuerySlice {
    /// Validates indices against `dims` (the full model dims, mode 0 included).
    pub fn new(dims: &[usize], entries: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (k, (index, _)) in entries.iter().enumerate() {
            if index.len() + 1 != dims.len() {
                return Err(Error::Index(format!(
                    "query entry {k} has {} indices, expected {}",
                    index.len(),
                    dims.len() - 1
                )));
            }
            for (m, (&i, &size)) in index.iter().zip(&dims[1..]).enumerate() {
                if i >= size {
                    return Err(Error::Index(format!(
                        "query entry {k}: index {} out of range 1..={size} in mode {}",
                        i + 1,
                        m + 2
                    )));
                }
            }
            if !seen.insert(index.clone()) {
                return Err(Error::Argument(format!("query entry {k}: duplicate index {index:?}")));
            }
        }
        Ok(QuerySlice { entries })
    }

    pub fn entries(&self) -> &[(Vec<usize>, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldInOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub ridge: f64,
    pub seed: u64,
}

impl From<&TrainConfig> for FoldInOptions {
    fn from(config: &TrainConfig) -> Self {
        FoldInOptions {
            epochs: config.fold_in_epochs,
            learning_rate: config.learning_rate,
            ridge: config.fold_in_ridge,
            seed: config.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldIn {
    pub row: Vec<f64>,
    /// `½ Σ (x − x̃)²` over the query after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Fits a mode-1 row for a new entity by SGD over its observed values with
/// the core and the other factors frozen, starting from zero.
pub fn fold_in(model: &TuckerModel, query: &QuerySlice, options: &FoldInOptions) -> Result<Vec<f64>> {
    fold_in_traced(model, query, options).map(|f| f.row)
}

pub fn fold_in_traced(model: &TuckerModel, query: &QuerySlice, options: &FoldInOptions) -> Result<FoldIn> {
    if query.is_empty() {
        return Err(Error::Argument("query has no entries".into()));
    }
    let dims = model.dims();
    // re-validate in case the slice was built against other dims
    QuerySlice::new(&dims, query.entries.clone())?;
    let j1 = model.core_dims()[0];

    // With everything but the query row frozen, each entry's gradient
    // direction is fixed; compute it once.
    let mut rows: Vec<Vec<f64>> = vec![vec![0.0; j1]];
    rows.extend(model.core_dims()[1..].iter().map(|&j| vec![0.0; j]));
    let directions: Vec<Vec<f64>> = query
        .entries
        .iter()
        .map(|(index, _)| {
            for (m, &i) in index.iter().enumerate() {
                rows[m + 1].copy_from_slice(model.factor(m + 1).row(i));
            }
            mode_gradient_vector(model.core(), &rows, 0)
        })
        .collect::<Result<_>>()?;

    let eta = options.learning_rate;
    let shrink = options.ridge / query.len() as f64;
    let mut u = vec![0.0; j1];
    let mut order: Vec<usize> = (0..query.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let loss = |u: &[f64]| -> f64 {
        query
            .entries
            .iter()
            .zip(&directions)
            .map(|((_, x), w)| (x - dot(u, w)).powi(2))
            .sum::<f64>()
            * 0.5
    };
    let mut loss_trace = Vec::with_capacity(options.epochs);
    for _ in 0..options.epochs {
        order.shuffle(&mut rng);
        for &e in &order {
            let w = &directions[e];
            let residual = dot(&u, w) - query.entries[e].1;
            for (uj, &wj) in u.iter_mut().zip(w) {
                *uj -= eta * (residual * wj + shrink * *uj);
            }
        }
        loss_trace.push(loss(&u));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            epoch: options.epochs,
            learning_rate: eta,
        });
    }
    Ok(FoldIn { row: u, loss_trace })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// 0-based row of the searched factor.
    pub entity: usize,
    pub distance: f64,
}

/// The `k` rows of `factor` nearest to `query` by Euclidean distance,
/// ascending, ties broken by row index.
pub fn top_k_rows(factor: &Matrix, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if query.len() != factor.cols() {
        return Err(Error::shape(
            Some(0),
            format!("query row has length {}, factor has {} columns", query.len(), factor.cols()),
        ));
    }
    if k == 0 || k > factor.rows() {
        return Err(Error::Argument(format!("k = {k} outside 1..={}", factor.rows())));
    }
    let mut all: Vec<Neighbor> = factor
        .iter_rows()
        .enumerate()
        .map(|(entity, row)| Neighbor {
            entity,
            distance: euclidean(row, query),
        })
        .collect();
    let by_distance = |a: &Neighbor, b: &Neighbor| a.distance.total_cmp(&b.distance).then(a.entity.cmp(&b.entity));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_distance);
        all.truncate(k);
    }
    all.sort_unstable_by(by_distance);
    Ok(all)
}

/// Nearest mode-1 entities of `model` to the latent row `query`.
pub fn top_k(model: &TuckerModel, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    top_k_rows(model.factor(0), query, k)
}

/// `S = G ×₁ u` for a 3-mode model, with its row norms and the column norms
/// of `S ×₃ U⁽³⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtypeMatrix {
    /// `J_2 × J_3`.
    pub s: Matrix,
    /// Length `J_2`.
    pub row_influence: Vec<f64>,
    /// Length `I_3`.
    pub platform_influence: Vec<f64>,
}

pub fn subtype_matrix(model: &TuckerModel, u: &[f64]) -> Result<SubtypeMatrix> {
    if model.order() != 3 {
        return Err(Error::UnsupportedOrder(model.order()));
    }
    let j = model.core_dims();
    if u.len() != j[0] {
        return Err(Error::shape(
            Some(0),
            format!("row has length {}, core mode has size {}", u.len(), j[0]),
        ));
    }
    let contracted: DenseTensor = model.core().mode_n_product(&Matrix::from_vec(1, j[0], u.to_vec())?, 0)?;
    let s = Matrix::from_vec(j[1], j[2], contracted.into_values())?;
    let row_influence = s.iter_rows().map(|r| dot(r, r).sqrt()).collect();
    let projected = s.matmul(&model.factor(2).transpose())?;
    let platform_influence = (0..projected.cols())
        .map(|c| (0..projected.rows()).map(|r| projected.get(r, c).powi(2)).sum::<f64>().sqrt())
        .collect();
    Ok(SubtypeMatrix {
        s,
        row_influence,
        platform_influence,
    })
}
