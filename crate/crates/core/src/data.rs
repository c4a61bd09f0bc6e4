//! Deterministic synthetic CTR data and a one-pass batched reader.
//!
//! Examples are derived by counter-based hashing of `(seed, index)`, so any
//! consumer can materialize any example without shared generator state.
//! Labels come from a hidden planted logistic teacher over per-id embedding
//! weights and the dense features, optionally flipped with probability
//! `label_noise`.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hash::{hash3, to_range, to_unit};
use crate::model::ModelArch;
use crate::num::Scalar;

// Hash stream ids.
const S_DENSE: u64 = 1;
const S_IDS: u64 = 0x100;
const S_LABEL: u64 = 2;
const S_FLIP: u64 = 3;
const S_TEACHER_DENSE: u64 = 0x200;
const S_TEACHER_EMB: u64 = 0x300;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub num_examples: u64,
    pub arch: ModelArch,
    /// Pooling multiplicity: ids looked up per table per example.
    pub ids_per_lookup: usize,
    pub label_noise: f64,
    pub seed: u64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_examples == 0 || self.ids_per_lookup == 0 {
            return Err(Error::InvalidConfig(
                "num_examples and ids_per_lookup must be >= 1".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::InvalidConfig("label_noise must be in [0, 0.5)".into()));
        }
        self.arch.validate()
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub dense_x: Vec<T>,
    /// `sparse_ids[table]` holds `ids_per_lookup` row ids.
    pub sparse_ids: Vec<Vec<u32>>,
    pub label: u8,
}

/// A batch of examples in struct-of-arrays form.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// Row-major `[len x dense_in_dim]`.
    pub dense_x: Vec<T>,
    /// `sparse_ids[table][example]` is the id list of one lookup.
    pub sparse_ids: Vec<Vec<Vec<u32>>>,
    pub labels: Vec<u8>,
    pub batch_index: u64,
    /// Global index of the first example in this batch.
    pub start_index: u64,
    pub len: usize,
}

/// Teacher weight on the dense feature `j`.
fn teacher_dense_w(seed: u64, j: usize) -> f64 {
    to_range(hash3(seed, S_TEACHER_DENSE, j as u64), -2.0, 2.0)
}

/// Teacher weight planted on `(table, id)`.
fn teacher_emb_w(seed: u64, table: usize, id: u32) -> f64 {
    to_range(hash3(seed, S_TEACHER_EMB + table as u64, id as u64), -2.0, 2.0)
}

fn raw_features(spec: &DataSpec, index: u64) -> (Vec<f64>, Vec<Vec<u32>>) {
    let arch = &spec.arch;
    let dense_x: Vec<f64> = (0..arch.dense_in_dim)
        .map(|j| {
            to_range(
                hash3(spec.seed, S_DENSE, index * arch.dense_in_dim as u64 + j as u64),
                -1.0,
                1.0,
            )
        })
        .collect();
    let sparse_ids: Vec<Vec<u32>> = (0..arch.num_tables)
        .map(|t| {
            (0..spec.ids_per_lookup)
                .map(|k| {
                    let h = hash3(
                        spec.seed,
                        S_IDS + t as u64,
                        index * spec.ids_per_lookup as u64 + k as u64,
                    );
                    (h % arch.rows_per_table as u64) as u32
                })
                .collect()
        })
        .collect();
    (dense_x, sparse_ids)
}

/// Sharpness of the planted teacher. The gain pushes most click
/// probabilities near 0 or 1 so the teacher's own labels carry little
/// irreducible entropy (its self-NE lands well under 0.05); learnable
/// structure then comes from `label_noise`.
pub const TEACHER_GAIN: f64 = 24.0;

/// Logit of the planted logistic teacher for example `index`.
pub fn teacher_logit(spec: &DataSpec, index: u64) -> f64 {
    let (dense_x, sparse_ids) = raw_features(spec, index);
    let mut z = 0.0;
    for (j, &x) in dense_x.iter().enumerate() {
        z += teacher_dense_w(spec.seed, j) * x;
    }
    for (t, ids) in sparse_ids.iter().enumerate() {
        let mut s = 0.0;
        for &id in ids {
            s += teacher_emb_w(spec.seed, t, id);
        }
        z += s / ids.len() as f64;
    }
    z * TEACHER_GAIN
}

/// Teacher click probability for example `index` (pre noise flip).
pub fn teacher_prob(spec: &DataSpec, index: u64) -> f64 {
    1.0 / (1.0 + (-teacher_logit(spec, index)).exp())
}

/// Deterministically materialize example `index`.
pub fn generate_example<T: Scalar>(spec: &DataSpec, index: u64) -> Result<Example<T>> {
    if index >= spec.num_examples {
        return Err(Error::IndexOutOfRange {
            index,
            num_examples: spec.num_examples,
        });
    }
    Ok(generate_example_unchecked(spec, index))
}

/// Like [`generate_example`] but without the range check; used for the
/// eval split, whose indices live past `num_examples`.
pub fn generate_example_unchecked<T: Scalar>(spec: &DataSpec, index: u64) -> Example<T> {
    let (dense_x, sparse_ids) = raw_features(spec, index);
    let p = teacher_prob(spec, index);
    let mut label = (to_unit(hash3(spec.seed, S_LABEL, index)) < p) as u8;
    if spec.label_noise > 0.0 && to_unit(hash3(spec.seed, S_FLIP, index)) < spec.label_noise {
        label ^= 1;
    }
    Example {
        dense_x: dense_x.into_iter().map(T::from_f64).collect(),
        sparse_ids,
        label,
    }
}

/// One-pass reader over a half-open index range. The cursor is a single
/// atomic, so arbitrary concurrent callers receive disjoint batches and
/// every example is yielded exactly once.
pub struct OnePassReader {
    spec: Arc<DataSpec>,
    cursor: AtomicU64,
    batch_size: usize,
    start: u64,
    end: u64,
}

impl OnePassReader {
    pub fn new(spec: Arc<DataSpec>, batch_size: usize) -> Self {
        let end = spec.num_examples;
        Self::over_range(spec, batch_size, 0, end)
    }

    pub fn over_range(spec: Arc<DataSpec>, batch_size: usize, start: u64, end: u64) -> Self {
        assert!(batch_size >= 1 && start <= end);
        OnePassReader {
            spec,
            cursor: AtomicU64::new(start),
            batch_size,
            start,
            end,
        }
    }

    pub fn spec(&self) -> &DataSpec {
        &self.spec
    }

    /// Next batch, or `None` once the range is exhausted. The final batch
    /// may be short.
    pub fn next_batch<T: Scalar>(&self) -> Option<Batch<T>> {
        let begin = self
            .cursor
            .fetch_add(self.batch_size as u64, Ordering::Relaxed)
            .min(self.end);
        if begin >= self.end {
            return None;
        }
        let len = ((self.end - begin) as usize).min(self.batch_size);
        let arch = &self.spec.arch;
        let mut dense_x = Vec::with_capacity(len * arch.dense_in_dim);
        let mut sparse_ids: Vec<Vec<Vec<u32>>> = vec![Vec::with_capacity(len); arch.num_tables];
        let mut labels = Vec::with_capacity(len);
        for i in 0..len as u64 {
            let ex: Example<T> = generate_example_unchecked(&self.spec, begin + i);
            dense_x.extend_from_slice(&ex.dense_x);
            for (t, ids) in ex.sparse_ids.into_iter().enumerate() {
                sparse_ids[t].push(ids);
            }
            labels.push(ex.label);
        }
        Some(Batch {
            dense_x,
            sparse_ids,
            labels,
            batch_index: (begin - self.start) / self.batch_size as u64,
            start_index: begin,
            len,
        })
    }
}

const DUMP_MAGIC: &[u8; 8] = b"BGSYNCD1";

/// Dump the full dataset as a little-endian binary record file: a header
/// carrying the `DataSpec`, then one fixed-width record per example.
pub fn dump_data(spec: &DataSpec, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DUMP_MAGIC)?;
    let arch = &spec.arch;
    let header_u64: Vec<u64> = vec![
        spec.num_examples,
        spec.ids_per_lookup as u64,
        spec.seed,
        arch.num_tables as u64,
        arch.embedding_dim as u64,
        arch.rows_per_table as u64,
        arch.dense_in_dim as u64,
        arch.bottom_mlp_dims.len() as u64,
        arch.top_mlp_dims.len() as u64,
    ];
    for v in header_u64 {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&spec.label_noise.to_le_bytes())?;
    for &d in arch.bottom_mlp_dims.iter().chain(&arch.top_mlp_dims) {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for index in 0..spec.num_examples {
        let ex: Example<f64> = generate_example_unchecked(spec, index);
        for x in &ex.dense_x {
            w.write_all(&x.to_le_bytes())?;
        }
        for ids in &ex.sparse_ids {
            for &id in ids {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        w.write_all(&[ex.label])?;
    }
    w.flush()?;
    Ok(())
}

/// Read back a file produced by [`dump_data`].
pub fn load_data(path: &Path) -> Result<(DataSpec, Vec<Example<f64>>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Protocol("bad dump magic".into()));
    }
    let mut u64s = [0u64; 9];
    for v in u64s.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *v = u64::from_le_bytes(b);
    }
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    let label_noise = f64::from_le_bytes(b);
    let read_dims = |r: &mut BufReader<std::fs::File>, n: u64| -> Result<Vec<usize>> {
        let mut dims = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        Ok(dims)
    };
    let bottom = read_dims(&mut r, u64s[7])?;
    let top = read_dims(&mut r, u64s[8])?;
    let spec = DataSpec {
        num_examples: u64s[0],
        ids_per_lookup: u64s[1] as usize,
        seed: u64s[2],
        arch: ModelArch {
            num_tables: u64s[3] as usize,
            embedding_dim: u64s[4] as usize,
            rows_per_table: u64s[5] as usize,
            dense_in_dim: u64s[6] as usize,
            bottom_mlp_dims: bottom,
            top_mlp_dims: top,
        },
        label_noise,
    };
    let mut examples = Vec::with_capacity(spec.num_examples as usize);
    for _ in 0..spec.num_examples {
        let mut dense_x = Vec::with_capacity(spec.arch.dense_in_dim);
        for _ in 0..spec.arch.dense_in_dim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dense_x.push(f64::from_le_bytes(b));
        }
        let mut sparse_ids = Vec::with_capacity(spec.arch.num_tables);
        for _ in 0..spec.arch.num_tables {
            let mut ids = Vec::with_capacity(spec.ids_per_lookup);
            for _ in 0..spec.ids_per_lookup {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                ids.push(u32::from_le_bytes(b));
            }
            sparse_ids.push(ids);
        }
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        examples.push(Example {
            dense_x,
            sparse_ids,
            label: b[0],
        });
    }
    Ok((spec, examples))
}
