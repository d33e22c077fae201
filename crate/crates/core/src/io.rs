//! Text formats for tensors, networks and queries; slice normalization; and
//! the on-disk model archive.
//!
//! Tensor file: a header line `N I_1 .. I_N`, then one `i_1 .. i_N value`
//! line per entry. Network file: one `k1 k2 [weight]` line per edge. Query
//! file: one `i_2 .. i_N value` line per observed value. Indices on disk are
//! 1-based; blank lines and lines starting with `#` are skipped.
//!
//! A model archive is a directory holding `manifest.json`, `core.bin` and
//! `factor_<n>.bin`; the binary files are raw little-endian `f64` in row-major
//! order.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TrainConfig, TuckerModel};
use crate::query::QuerySlice;
use crate::tensor::{ConstraintGraph, DenseTensor, Matrix, SparseTensor, SparseTensorBuilder};

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const CORE_FILE: &str = "core.bin";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Yields `(1-based line number, fields)` for every meaningful line.
fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = std::io::Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(k, line)| line.map(|l| (k + 1, l)))
        .filter(|r| match r {
            Ok((_, l)) => {
                let t = l.trim();
                !t.is_empty() && !t.starts_with('#')
            }
            Err(_) => true,
        })
}

fn parse_index(path: &Path, line: usize, field: &str) -> Result<usize> {
    match field.parse::<usize>() {
        Ok(0) | Err(_) => Err(parse_err(
            path,
            line,
            format!("`{field}` is not a positive integer index"),
        )),
        Ok(i) => Ok(i - 1),
    }
}

fn parse_value(path: &Path, line: usize, field: &str) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(path, line, format!("`{field}` is not a finite number"))),
    }
}

pub fn load_sparse_tensor(path: impl AsRef<Path>) -> Result<SparseTensor> {
    let path = path.as_ref();
    read_sparse_tensor(BufReader::new(File::open(path)?), path)
}

/// Streams a tensor file; `path` is only used in error messages.
pub fn read_sparse_tensor<R: BufRead>(reader: R, path: &Path) -> Result<SparseTensor> {
    let mut lines = content_lines(reader);
    let (header_line, header) = match lines.next() {
        Some(r) => r?,
        None => return Err(parse_err(path, 1, "missing header `N I_1 .. I_N`")),
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let order: usize = fields[0]
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| parse_err(path, header_line, "header must start with a positive mode count"))?;
    if fields.len() != order + 1 {
        return Err(parse_err(
            path,
            header_line,
            format!("header declares {order} modes but lists {} sizes", fields.len() - 1),
        ));
    }
    let dims = fields[1..]
        .iter()
        .map(|f| parse_index(path, header_line, f).map(|i| i + 1))
        .collect::<Result<Vec<_>>>()?;
    let mut builder = SparseTensorBuilder::new(dims)?;
    let mut index = vec![0usize; order];
    for item in lines {
        let (line, text) = item?;
        let mut fields = text.split_whitespace();
        for slot in index.iter_mut() {
            let f = fields
                .next()
                .ok_or_else(|| parse_err(path, line, format!("expected {order} indices and a value")))?;
            *slot = parse_index(path, line, f)?;
        }
        let value = fields
            .next()
            .ok_or_else(|| parse_err(path, line, "missing value"))
            .and_then(|f| parse_value(path, line, f))?;
        if fields.next().is_some() {
            return Err(parse_err(path, line, "trailing fields after value"));
        }
        builder
            .push(&index, value)
            .map_err(|e| parse_err(path, line, e.to_string()))?;
    }
    Ok(builder.build())
}

pub fn write_sparse_tensor<W: Write>(tensor: &SparseTensor, out: &mut W) -> std::io::Result<()> {
    write!(out, "{}", tensor.order())?;
    for d in tensor.dims() {
        write!(out, " {d}")?;
    }
    writeln!(out)?;
    for (index, value) in tensor.entries() {
        for i in index {
            write!(out, "{} ", i + 1)?;
        }
        writeln!(out, "{value}")?;
    }
    Ok(())
}

pub fn save_sparse_tensor(tensor: &SparseTensor, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_sparse_tensor(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads an edge list over the `node_count` entities of `mode` (0-based).
pub fn load_network(path: impl AsRef<Path>, node_count: usize, mode: usize) -> Result<ConstraintGraph> {
    let path = path.as_ref();
    read_network(BufReader::new(File::open(path)?), path, node_count, mode)
}

pub fn read_network<R: BufRead>(reader: R, path: &Path, node_count: usize, mode: usize) -> Result<ConstraintGraph> {
    let mut graph = ConstraintGraph::new(node_count, mode);
    for item in content_lines(reader) {
        let (line, text) = item?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(parse_err(path, line, "expected `k1 k2 [weight]`"));
        }
        let a = parse_index(path, line, fields[0])?;
        let b = parse_index(path, line, fields[1])?;
        let w = match fields.get(2) {
            Some(f) => parse_value(path, line, f)?,
            None => 1.0,
        };
        graph
            .add_edge(a, b, w)
            .map_err(|e| parse_err(path, line, e.to_string()))?;
    }
    Ok(graph)
}

pub fn write_network<W: Write>(graph: &ConstraintGraph, out: &mut W) -> std::io::Result<()> {
    for e in graph.edges() {
        writeln!(out, "{} {} {}", e.a + 1, e.b + 1, e.weight)?;
    }
    Ok(())
}

pub fn save_network(graph: &ConstraintGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_network(graph, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a query for a new mode-1 entity of a model with `dims`.
pub fn load_query(path: impl AsRef<Path>, dims: &[usize]) -> Result<QuerySlice> {
    let path = path.as_ref();
    let arity = dims.len() - 1;
    let mut entries = Vec::new();
    for item in content_lines(BufReader::new(File::open(path)?)) {
        let (line, text) = item?;
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != arity + 1 {
            return Err(parse_err(path, line, format!("expected {arity} indices and a value")));
        }
        let index = fields[..arity]
            .iter()
            .map(|f| parse_index(path, line, f))
            .collect::<Result<Vec<_>>>()?;
        let value = parse_value(path, line, fields[arity])?;
        entries.push((index, value));
    }
    QuerySlice::new(dims, entries)
}

/// Per-slice `(min, max)` over the stored entries of every slice along `mode`.
fn slice_ranges(tensor: &SparseTensor, mode: usize) -> Result<Vec<(f64, f64)>> {
    if mode >= tensor.order() {
        return Err(Error::Index(format!(
            "slice mode {} out of range for a {}-mode tensor",
            mode + 1,
            tensor.order()
        )));
    }
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); tensor.dims()[mode]];
    for (index, v) in tensor.entries() {
        let r = &mut ranges[index[mode] as usize];
        r.0 = r.0.min(v);
        r.1 = r.1.max(v);
    }
    if let Some(empty) = tensor.row_counts(mode).iter().position(|&c| c == 0) {
        return Err(Error::Normalization {
            mode: mode + 1,
            slice: empty + 1,
            message: "slice has no entries".into(),
        });
    }
    Ok(ranges)
}

/// Maps each slice along `mode` to `[0, 1]` by `(v − min)/(max − min)`;
/// constant slices become all zeros.
pub fn min_max_slices(tensor: &SparseTensor, mode: usize) -> Result<SparseTensor> {
    let ranges = slice_ranges(tensor, mode)?;
    let values = tensor
        .entries()
        .map(|(index, v)| {
            let (lo, hi) = ranges[index[mode] as usize];
            if hi > lo {
                (v - lo) / (hi - lo)
            } else {
                0.0
            }
        })
        .collect();
    tensor.with_values(values)
}

/// Min-max normalizes each slice along `mode`, then scales every
/// non-constant slice to unit Frobenius norm.
pub fn normalize_slices(tensor: &SparseTensor, mode: usize) -> Result<SparseTensor> {
    let scaled = min_max_slices(tensor, mode)?;
    let mut sq = vec![0.0; tensor.dims()[mode]];
    for (index, v) in scaled.entries() {
        sq[index[mode] as usize] += v * v;
    }
    let values = scaled
        .entries()
        .map(|(index, v)| {
            let norm = sq[index[mode] as usize].sqrt();
            if norm > 0.0 {
                v / norm
            } else {
                v
            }
        })
        .collect();
    scaled.with_values(values)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dims: Vec<usize>,
    core_dims: Vec<usize>,
    config: TrainConfig,
}

/// A persisted model together with the configuration that trained it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub format_version: u32,
    pub model: TuckerModel,
    pub config: TrainConfig,
}

fn factor_file(n: usize) -> String {
    format!("factor_{}.bin", n + 1)
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(dir: &Path, name: &str, expected: usize) -> Result<Vec<f64>> {
    let path = dir.join(name);
    let mut bytes = Vec::new();
    File::open(&path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Archive {
            path,
            message: format!(
                "shape corruption: expected {expected} values ({} bytes), found {} bytes",
                expected * 8,
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Writes `model` and `config` into the directory `dir`, creating it if needed.
pub fn save_model(model: &TuckerModel, config: &TrainConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: ARCHIVE_FORMAT_VERSION,
        dims: model.dims(),
        core_dims: model.core_dims().to_vec(),
        config: config.clone(),
    };
    let mut w = BufWriter::new(File::create(dir.join(MANIFEST))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    write_f64s(&dir.join(CORE_FILE), model.core().values())?;
    for (n, u) in model.factors().iter().enumerate() {
        write_f64s(&dir.join(factor_file(n)), u.as_slice())?;
    }
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelArchive> {
    let dir = dir.as_ref();
    let archive_err = |message: String| Error::Archive {
        path: PathBuf::from(dir),
        message,
    };
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join(MANIFEST))?))?;
    if manifest.format_version != ARCHIVE_FORMAT_VERSION {
        return Err(archive_err(format!(
            "version mismatch: archive has format {}, this build reads {ARCHIVE_FORMAT_VERSION}",
            manifest.format_version
        )));
    }
    if manifest.dims.len() != manifest.core_dims.len() || manifest.dims.is_empty() {
        return Err(archive_err(format!(
            "shape corruption: dims {:?} and core dims {:?} disagree",
            manifest.dims, manifest.core_dims
        )));
    }
    if manifest.config.core_dims != manifest.core_dims {
        return Err(archive_err("shape corruption: configured core differs from stored core".into()));
    }
    let core_len = manifest.core_dims.iter().product();
    let core = DenseTensor::new(manifest.core_dims.clone(), read_f64s(dir, CORE_FILE, core_len)?)
        .map_err(|e| archive_err(format!("shape corruption: {e}")))?;
    let factors = manifest
        .dims
        .iter()
        .zip(&manifest.core_dims)
        .enumerate()
        .map(|(n, (&i, &j))| Matrix::from_vec(i, j, read_f64s(dir, &factor_file(n), i * j)?))
        .collect::<Result<Vec<_>>>()?;
    let model = TuckerModel::new(core, factors).map_err(|e| archive_err(format!("shape corruption: {e}")))?;
    Ok(ModelArchive {
        format_version: manifest.format_version,
        model,
        config: manifest.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::tensor::FrobeniusNorm;

    fn read_str(text: &str) -> Result<SparseTensor> {
        read_sparse_tensor(text.as_bytes(), Path::new("mem"))
    }

    #[test]
    fn single_entry_tensor() {
        let t = read_str("3 2 2 2\n1 1 1 0.5\n").unwrap();
        assert_eq!(t.order(), 3);
        assert_eq!(t.nnz(), 1);
        assert_eq!(t.index(0), &[0, 0, 0]);
        assert_eq!(t.value(0), 0.5);
    }

    #[test]
    fn duplicate_entry_cites_line() {
        let err = read_str("3 2 2 2\n1 1 1 0.5\n1 1 1 0.5\n").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_tensor_lines() {
        assert!(matches!(read_str("3 2 2 2\n1 3 1 0.5\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_str("3 2 2 2\n1 1 1 abc\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_str("3 2 2 2\n0 1 1 1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(read_str("3 2 2\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(read_str(""), Err(Error::Parse { .. })));
        assert!(matches!(read_str("2 2 2\n1 1 nan\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn network_defaults_and_rejections() {
        let g = read_network("1 2\n2 3 0.5\n".as_bytes(), Path::new("mem"), 3, 1).unwrap();
        assert_eq!(g.edges()[0].weight, 1.0);
        assert_eq!((g.edges()[0].a, g.edges()[0].b), (0, 1));
        assert_eq!(g.edges()[1].weight, 0.5);
        let dup = read_network("1 2\n2 1\n".as_bytes(), Path::new("mem"), 3, 1);
        assert!(matches!(dup, Err(Error::Parse { line: 2, .. })));
        let self_loop = read_network("\n2 2\n".as_bytes(), Path::new("mem"), 3, 1);
        assert!(matches!(self_loop, Err(Error::Parse { line: 2, .. })));
        let oob = read_network("1 4\n".as_bytes(), Path::new("mem"), 3, 1);
        assert!(matches!(oob, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn normalize_worked_example() {
        let t = SparseTensor::from_entries(
            vec![3, 1],
            vec![(vec![0, 0], 0.0), (vec![1, 0], 5.0), (vec![2, 0], 10.0)],
        )
        .unwrap();
        let n = normalize_slices(&t, 1).unwrap();
        let s = 1.25f64.sqrt();
        assert_eq!(n.value(0), 0.0);
        assert_relative_eq!(n.value(1), 0.5 / s, max_relative = 1e-15);
        assert_relative_eq!(n.value(2), 1.0 / s, max_relative = 1e-15);
    }

    #[test]
    fn constant_slice_maps_to_zero() {
        let t = SparseTensor::from_entries(vec![2, 2], vec![(vec![0, 0], 4.0), (vec![1, 0], 4.0), (vec![0, 1], 1.0), (vec![1, 1], 2.0)])
            .unwrap();
        let n = normalize_slices(&t, 1).unwrap();
        assert_eq!(n.value(0), 0.0);
        assert_eq!(n.value(1), 0.0);
        assert_eq!(n.value(2), 0.0);
        assert_eq!(n.value(3), 1.0);
    }

    #[test]
    fn every_slice_has_unit_or_zero_norm() {
        let mut entries = Vec::new();
        for i in 0..6 {
            for k in 0..4 {
                if (i + k) % 3 != 0 {
                    let v = if k == 2 { 7.0 } else { (i * 13 + k * 7) as f64 % 11.0 - 3.0 };
                    entries.push((vec![i, k], v));
                }
            }
        }
        let t = SparseTensor::from_entries(vec![6, 4], entries).unwrap();
        let n = normalize_slices(&t, 1).unwrap();
        for k in 0..4 {
            let pos: Vec<usize> = (0..n.nnz()).filter(|&e| n.index(e)[1] == k as u32).collect();
            let norm = n.select(&pos).frobenius_norm();
            if k == 2 {
                assert_eq!(norm, 0.0);
            } else {
                assert_relative_eq!(norm, 1.0, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn min_max_is_idempotent() {
        let t = SparseTensor::from_entries(
            vec![2, 3],
            vec![(vec![0, 0], -2.0), (vec![1, 0], 6.0), (vec![0, 1], 3.0), (vec![1, 1], 3.5), (vec![0, 2], 1.0)],
        )
        .unwrap();
        let once = min_max_slices(&t, 1).unwrap();
        let twice = min_max_slices(&once, 1).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn empty_slice_is_an_error() {
        let t = SparseTensor::from_entries(vec![2, 3], vec![(vec![0, 0], 1.0), (vec![1, 2], 2.0)]).unwrap();
        match normalize_slices(&t, 1) {
            Err(Error::Normalization { slice, .. }) => assert_eq!(slice, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn small_model() -> (TuckerModel, TrainConfig) {
        let mut cfg = TrainConfig::new(vec![2, 3, 2]);
        cfg.seed = 11;
        cfg.lambda_g = 0.1;
        (TuckerModel::init_random(&[4, 5, 3], &cfg).unwrap(), cfg)
    }

    #[test]
    fn model_archive_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (model, cfg) = small_model();
        save_model(&model, &cfg, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.format_version, ARCHIVE_FORMAT_VERSION);
        assert_eq!(back.model, model);
        assert_eq!(back.config, cfg);
        for (a, b) in back.model.core().values().iter().zip(model.core().values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn archive_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (model, cfg) = small_model();
        save_model(&model, &cfg, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&path, text).unwrap();
        match load_model(dir.path()) {
            Err(Error::Archive { message, .. }) => assert!(message.contains("version mismatch")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn archive_truncated_factor() {
        let dir = tempfile::tempdir().unwrap();
        let (model, cfg) = small_model();
        save_model(&model, &cfg, dir.path()).unwrap();
        let path = dir.path().join("factor_2.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match load_model(dir.path()) {
            Err(Error::Archive { message, .. }) => assert!(message.contains("shape corruption")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn query_file_parses_one_based() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.txt");
        fs::write(&path, "1 1 0.25\n\n2 3 1.5\n").unwrap();
        let q = load_query(&path, &[4, 2, 3]).unwrap();
        assert_eq!(q.entries(), &[(vec![0, 0], 0.25), (vec![1, 2], 1.5)]);
        fs::write(&path, "1 4 0.25\n").unwrap();
        assert!(load_query(&path, &[4, 2, 3]).is_err());
    }

    #[test]
    fn large_network_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.txt");
        let n = 1000;
        let mut g = ConstraintGraph::new(n, 1);
        let mut count = 0;
        'outer: for a in 0..n {
            for b in (a + 1)..n {
                g.add_edge(a, b, 1.0 + ((a * 31 + b) % 7) as f64 / 8.0).unwrap();
                count += 1;
                if count == 100_000 {
                    break 'outer;
                }
            }
        }
        save_network(&g, &path).unwrap();
        let back = load_network(&path, n, 1).unwrap();
        assert_eq!(back.len(), 100_000);
        assert_eq!(back.edges(), g.edges());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn tensor_strategy() -> impl Strategy<Value = SparseTensor> {
            prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
                let cells: usize = dims.iter().product();
                (
                    Just(dims),
                    prop::collection::btree_map(0..cells, -1e6f64..1e6, 0..cells.min(20) + 1),
                )
                    .prop_map(|(dims, cells)| {
                        let entries = cells.into_iter().map(|(mut lin, v)| {
                            let mut idx = vec![0; dims.len()];
                            for n in (0..dims.len()).rev() {
                                idx[n] = lin % dims[n];
                                lin /= dims[n];
                            }
                            (idx, v)
                        });
                        SparseTensor::from_entries(dims.clone(), entries).unwrap()
                    })
            })
        }

        proptest! {
            #[test]
            fn tensor_text_round_trip(t in tensor_strategy()) {
                let mut buf = Vec::new();
                write_sparse_tensor(&t, &mut buf).unwrap();
                let back = read_sparse_tensor(buf.as_slice(), Path::new("mem")).unwrap();
                prop_assert_eq!(back, t);
            }

            #[test]
            fn normalized_values_in_unit_interval(t in tensor_strategy()) {
                let last = t.order() - 1;
                if t.row_counts(last).iter().all(|&c| c > 0) {
                    let n = normalize_slices(&t, last).unwrap();
                    for &v in n.values() {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }
}
