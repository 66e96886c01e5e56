//! Dataset ingestion and writing, label-driven pair sampling, pair
//! partitioning across workers, and synthetic cluster generation.
//!
//! File formats:
//! - dense CSV: optional leading integer label column, then float features.
//!   A file is treated as labeled when the first field of the first row
//!   parses as an integer literal (no `.` or exponent). The writer always
//!   emits features with a decimal marker, so round-trips are unambiguous.
//! - sparse: `label idx:val idx:val ...` per line, 1-based indices,
//!   whitespace separated.
//! - pair files: binary, magic `DMLP`, version, pair counts, then
//!   little-endian `(u64, u64)` index pairs, similar block first.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metric::{Dataset, PairSet};

const PAIR_MAGIC: &[u8; 4] = b"DMLP";
const PAIR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    DenseCsv,
    SparseIndexed,
}

/// Pair shards for `P` workers; disjoint, union equals the input.
#[derive(Debug, Clone)]
pub struct PairPartition {
    pub shards: Vec<PairSet>,
}

/// Parameters for the synthetic Gaussian-cluster generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub d: usize,
    pub cluster_spread: f64,
    pub center_spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.per_class == 0 || self.d == 0 {
            return Err(Error::Config("synthetic counts must be >= 1".into()));
        }
        if self.cluster_spread <= 0.0 || self.center_spread <= 0.0 {
            return Err(Error::Config("synthetic spreads must be > 0".into()));
        }
        Ok(())
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    load_dataset_with_dim(path, format, None)
}

/// Loads a dataset; `dim` overrides the inferred dimensionality (required to
/// catch out-of-range sparse indices, optional otherwise).
pub fn load_dataset_with_dim(
    path: &Path,
    format: DatasetFormat,
    dim: Option<usize>,
) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    match format {
        DatasetFormat::DenseCsv => load_dense_csv(reader, dim),
        DatasetFormat::SparseIndexed => load_sparse(reader, dim),
    }
}

fn is_integer_literal(tok: &str) -> bool {
    !tok.is_empty()
        && !tok.contains(['.', 'e', 'E'])
        && tok.parse::<i64>().is_ok()
}

fn load_dense_csv<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Dataset> {
    let mut vectors: Vec<f32> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut labeled: Option<bool> = None;
    let mut d: Option<usize> = dim;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        let has_label = *labeled.get_or_insert_with(|| is_integer_literal(fields[0]));
        let feature_fields = if has_label {
            if fields.len() < 2 {
                return Err(Error::Parse {
                    line: line_num,
                    msg: "labeled row with no features".into(),
                });
            }
            labels.push(fields[0].parse::<i64>().map_err(|_| Error::Parse {
                line: line_num,
                msg: format!("bad label field {:?}", fields[0]),
            })?);
            &fields[1..]
        } else {
            &fields[..]
        };
        let row_d = feature_fields.len();
        match d {
            None => d = Some(row_d),
            Some(expect) if expect != row_d => {
                return Err(Error::Parse {
                    line: line_num,
                    msg: format!("ragged row: {row_d} features, expected {expect}"),
                });
            }
            _ => {}
        }
        for f in feature_fields {
            let v: f32 = f.parse().map_err(|_| Error::Parse {
                line: line_num,
                msg: format!("non-numeric field {f:?}"),
            })?;
            vectors.push(v);
        }
    }
    let d = d.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "empty dataset file".into(),
    })?;
    let labels = if labeled == Some(true) { Some(labels) } else { None };
    Dataset::new(d, vectors, labels)
}

fn load_sparse<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Dataset> {
    // first pass into sparse rows, then densify
    let mut rows: Vec<(i64, Vec<(usize, f32)>)> = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut toks = trimmed.split_whitespace();
        let label_tok = toks.next().unwrap();
        let label: i64 = label_tok.parse().map_err(|_| Error::Parse {
            line: line_num,
            msg: format!("bad label field {label_tok:?}"),
        })?;
        let mut entries = Vec::new();
        for tok in toks {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: line_num,
                msg: format!("expected idx:val, got {tok:?}"),
            })?;
            let idx: usize = idx_s.parse().map_err(|_| Error::Parse {
                line: line_num,
                msg: format!("bad index {idx_s:?}"),
            })?;
            if idx == 0 {
                return Err(Error::Parse {
                    line: line_num,
                    msg: "sparse indices are 1-based; got 0".into(),
                });
            }
            if let Some(d) = dim {
                if idx > d {
                    return Err(Error::Parse {
                        line: line_num,
                        msg: format!("index {idx} exceeds declared dimension {d}"),
                    });
                }
            }
            let val: f32 = val_s.parse().map_err(|_| Error::Parse {
                line: line_num,
                msg: format!("non-numeric value {val_s:?}"),
            })?;
            max_index = max_index.max(idx);
            entries.push((idx - 1, val));
        }
        rows.push((label, entries));
    }
    let d = dim.unwrap_or(max_index);
    if d == 0 {
        return Err(Error::Parse {
            line: 0,
            msg: "could not infer dimensionality from sparse file".into(),
        });
    }
    let mut vectors = vec![0.0f32; rows.len() * d];
    let mut labels = Vec::with_capacity(rows.len());
    for (r, (label, entries)) in rows.into_iter().enumerate() {
        labels.push(label);
        for (idx, val) in entries {
            vectors[r * d + idx] = val;
        }
    }
    Dataset::new(d, vectors, Some(labels))
}

pub fn write_dataset(path: &Path, data: &Dataset, format: DatasetFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        DatasetFormat::DenseCsv => {
            for i in 0..data.n() {
                let mut fields: Vec<String> = Vec::with_capacity(data.d() + 1);
                if let Some(label) = data.label(i) {
                    fields.push(label.to_string());
                }
                // Debug formatting always includes a decimal marker and
                // round-trips f32 exactly
                fields.extend(data.vector(i).iter().map(|v| format!("{v:?}")));
                writeln!(w, "{}", fields.join(","))?;
            }
        }
        DatasetFormat::SparseIndexed => {
            for i in 0..data.n() {
                let label = data.label(i).unwrap_or(0);
                let mut line = label.to_string();
                for (j, &v) in data.vector(i).iter().enumerate() {
                    if v != 0.0 {
                        line.push_str(&format!(" {}:{v:?}", j + 1));
                    }
                }
                writeln!(w, "{line}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Samples labeled index pairs with replacement until both quotas are met.
/// Same-label draws fill the similar list, different-label draws the
/// dissimilar list.
pub fn sample_pairs(
    data: &Dataset,
    n_similar: usize,
    n_dissimilar: usize,
    seed: u64,
) -> Result<PairSet> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Config("pair sampling needs labels".into()))?;
    let n = data.n();
    if n < 2 {
        return Err(Error::Config("need at least two samples".into()));
    }
    if n_similar > 0 {
        let mut counts = std::collections::HashMap::new();
        for &l in labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        if !counts.values().any(|&c| c >= 2) {
            return Err(Error::Config(
                "no label has two samples; similar quota unsatisfiable".into(),
            ));
        }
    }
    if n_dissimilar > 0 && labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Config(
            "all labels identical; dissimilar quota unsatisfiable".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut similar = Vec::with_capacity(n_similar);
    let mut dissimilar = Vec::with_capacity(n_dissimilar);
    while similar.len() < n_similar || dissimilar.len() < n_dissimilar {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        if labels[i] == labels[j] {
            if similar.len() < n_similar {
                similar.push((i, j));
            }
        } else if dissimilar.len() < n_dissimilar {
            dissimilar.push((i, j));
        }
    }
    Ok(PairSet {
        similar,
        dissimilar,
    })
}

/// Splits a pair set into `p` shards: seeded shuffle then round-robin,
/// separately for the similar and dissimilar lists. `p = 1` returns the
/// input unchanged.
pub fn partition_pairs(pairs: &PairSet, p: usize, seed: u64) -> Result<PairPartition> {
    if p == 0 {
        return Err(Error::Config("worker count must be >= 1".into()));
    }
    if p == 1 {
        return Ok(PairPartition {
            shards: vec![pairs.clone()],
        });
    }
    if (!pairs.similar.is_empty() && p > pairs.similar.len())
        || (!pairs.dissimilar.is_empty() && p > pairs.dissimilar.len())
    {
        log::warn!(
            "partitioning {} similar / {} dissimilar pairs across {p} workers leaves empty shard sides",
            pairs.similar.len(),
            pairs.dissimilar.len()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = |list: &[(usize, usize)], rng: &mut ChaCha8Rng| -> Vec<Vec<(usize, usize)>> {
        let mut shuffled = list.to_vec();
        shuffled.shuffle(rng);
        let mut shards = vec![Vec::new(); p];
        for (i, pair) in shuffled.into_iter().enumerate() {
            shards[i % p].push(pair);
        }
        shards
    };
    let sim_shards = split(&pairs.similar, &mut rng);
    let dis_shards = split(&pairs.dissimilar, &mut rng);
    let shards = sim_shards
        .into_iter()
        .zip(dis_shards)
        .map(|(similar, dissimilar)| PairSet {
            similar,
            dissimilar,
        })
        .collect();
    Ok(PairPartition { shards })
}

/// Gaussian cluster generator: `n_classes` centers drawn at scale
/// `center_spread`, `per_class` points per center at scale `cluster_spread`,
/// labels are cluster indices.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center_dist = Normal::new(0.0f64, spec.center_spread).expect("valid spread");
    let point_dist = Normal::new(0.0f64, spec.cluster_spread).expect("valid spread");
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..spec.d).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();
    let n = spec.n_classes * spec.per_class;
    let mut vectors = Vec::with_capacity(n * spec.d);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &c in center {
                vectors.push((c + point_dist.sample(&mut rng)) as f32);
            }
            labels.push(class as i64);
        }
    }
    Dataset::new(spec.d, vectors, Some(labels))
}

pub fn write_pairs(path: &Path, pairs: &PairSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PAIR_MAGIC)?;
    w.write_all(&PAIR_VERSION.to_le_bytes())?;
    w.write_all(&(pairs.similar.len() as u64).to_le_bytes())?;
    w.write_all(&(pairs.dissimilar.len() as u64).to_le_bytes())?;
    for &(i, j) in pairs.similar.iter().chain(pairs.dissimilar.iter()) {
        w.write_all(&(i as u64).to_le_bytes())?;
        w.write_all(&(j as u64).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<PairSet> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PAIR_MAGIC {
        return Err(Error::Protocol(format!(
            "bad pair-file magic {magic:?}, expected {PAIR_MAGIC:?}"
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != PAIR_VERSION {
        return Err(Error::Protocol(format!(
            "unsupported pair-file version {version}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let n_similar = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let n_dissimilar = u64::from_le_bytes(buf8) as usize;
    let read_pair = |r: &mut BufReader<File>| -> Result<(usize, usize)> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let i = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let j = u64::from_le_bytes(b) as usize;
        Ok((i, j))
    };
    let mut similar = Vec::with_capacity(n_similar);
    for _ in 0..n_similar {
        similar.push(read_pair(&mut r)?);
    }
    let mut dissimilar = Vec::with_capacity(n_dissimilar);
    for _ in 0..n_dissimilar {
        dissimilar.push(read_pair(&mut r)?);
    }
    Ok(PairSet {
        similar,
        dissimilar,
    })
}
