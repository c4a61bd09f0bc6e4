//! Model parallelism for the embedding tables: shard planning via LPT bin
//! packing, server-side partial pooling, and lock-free application of
//! sparse gradients.
//!
//! Pooled lookups have a fixed summation order so that a sharded lookup is
//! bit-exact against a single-host lookup with the same grouping: shard
//! groups are combined in ascending (ps_id, row_start) order, and ids are
//! summed in ascending order within each shard.

use std::sync::Arc;

use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::hash::{hash3, to_range};
use crate::model::ModelArch;
use crate::num::{AtomicScalar, HogwildVec, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Sum,
    Mean,
}

/// Contiguous slice of one table's rows: `[row_start, row_end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardSpec {
    pub table_id: usize,
    pub row_start: u32,
    pub row_end: u32,
}

impl ShardSpec {
    pub fn contains(&self, id: u32) -> bool {
        id >= self.row_start && id < self.row_end
    }

    pub fn rows(&self) -> usize {
        (self.row_end - self.row_start) as usize
    }
}

/// Assignment of shards to embedding parameter servers.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardPlan {
    pub shards: Vec<ShardSpec>,
    /// `assignments[shard_index]` is the hosting ps_id.
    pub assignments: Vec<usize>,
    pub per_ps_cost: Vec<f64>,
}

impl ShardPlan {
    pub fn num_ps(&self) -> usize {
        self.per_ps_cost.len()
    }

    /// Shard indices of `table`, ordered by the fixed combine order:
    /// ascending ps_id, then ascending row_start.
    pub fn table_shards_in_combine_order(&self, table: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.shards.len())
            .filter(|&s| self.shards[s].table_id == table)
            .collect();
        idx.sort_by_key(|&s| (self.assignments[s], self.shards[s].row_start));
        idx
    }
}

/// Split every table into contiguous shards. Each table is split into
/// enough pieces that the plan has at least `num_ps` shards to spread.
pub fn plan_shards(arch: &ModelArch, num_ps: usize) -> Vec<ShardSpec> {
    let per_table = num_ps.div_ceil(arch.num_tables).max(1).min(arch.rows_per_table);
    let mut shards = Vec::new();
    for table_id in 0..arch.num_tables {
        let rows = arch.rows_per_table as u32;
        let chunk = rows.div_ceil(per_table as u32);
        let mut start = 0;
        while start < rows {
            let end = (start + chunk).min(rows);
            shards.push(ShardSpec {
                table_id,
                row_start: start,
                row_end: end,
            });
            start = end;
        }
    }
    shards
}

/// Lookup-frequency x embedding-dim cost of each shard, profiled over a
/// warm-up prefix of the dataset.
pub fn profile_costs(spec: &DataSpec, shards: &[ShardSpec], warmup: u64) -> Vec<f64> {
    let warmup = warmup.min(spec.num_examples);
    let mut freq = vec![0u64; shards.len()];
    for index in 0..warmup {
        let ex: crate::data::Example<f64> =
            crate::data::generate_example_unchecked(spec, index);
        for (t, ids) in ex.sparse_ids.iter().enumerate() {
            for &id in ids {
                for (s, shard) in shards.iter().enumerate() {
                    if shard.table_id == t && shard.contains(id) {
                        freq[s] += 1;
                        break;
                    }
                }
            }
        }
    }
    freq.iter()
        .map(|&f| f as f64 * spec.arch.embedding_dim as f64)
        .collect()
}

/// Default warm-up sample size: min(1% of the dataset, 10k examples).
pub fn default_warmup(num_examples: u64) -> u64 {
    (num_examples / 100).clamp(1, 10_000)
}

/// Longest-processing-time greedy bin packing: shards sorted by cost
/// descending (ties by lower shard index), each assigned to the currently
/// least-loaded PS (ties by lowest ps_id).
pub fn profile_and_partition(shards: &[ShardSpec], lookup_costs: &[f64], num_ps: usize) -> Result<ShardPlan> {
    if num_ps == 0 {
        return Err(Error::InvalidConfig("num_ps must be >= 1".into()));
    }
    if shards.len() != lookup_costs.len() {
        return Err(Error::InvalidConfig(format!(
            "{} shards but {} costs",
            shards.len(),
            lookup_costs.len()
        )));
    }
    if lookup_costs.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::InvalidConfig("shard costs must be finite and >= 0".into()));
    }
    let mut order: Vec<usize> = (0..shards.len()).collect();
    order.sort_by(|&a, &b| {
        lookup_costs[b]
            .partial_cmp(&lookup_costs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut per_ps_cost = vec![0.0f64; num_ps];
    let mut assignments = vec![0usize; shards.len()];
    for s in order {
        let ps = per_ps_cost
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assignments[s] = ps;
        per_ps_cost[ps] += lookup_costs[s];
    }
    Ok(ShardPlan {
        shards: shards.to_vec(),
        assignments,
        per_ps_cost,
    })
}

/// One embedding shard hosted on a PS: rows plus Adagrad accumulators,
/// both under the Hogwild contract.
pub struct EmbeddingShard<T: AtomicScalar> {
    pub spec: ShardSpec,
    pub dim: usize,
    /// Row-major `[rows() x dim]`.
    pub rows: HogwildVec<T>,
    pub adagrad_acc: HogwildVec<T>,
}

/// Deterministic initial embedding value for (table, row, col):
/// uniform(-1/sqrt(dim), +1/sqrt(dim)).
pub fn init_embedding_value<T: Scalar>(seed: u64, table: usize, row: u32, col: usize, dim: usize) -> T {
    let bound = 1.0 / (dim as f64).sqrt();
    let h = hash3(seed, 0x500 + table as u64, row as u64 * dim as u64 + col as u64);
    T::from_f64(to_range(h, -bound, bound))
}

impl<T: AtomicScalar> EmbeddingShard<T> {
    pub fn init(spec: ShardSpec, dim: usize, seed: u64) -> Self {
        let mut values = Vec::with_capacity(spec.rows() * dim);
        for row in spec.row_start..spec.row_end {
            for col in 0..dim {
                values.push(init_embedding_value(seed, spec.table_id, row, col, dim));
            }
        }
        EmbeddingShard {
            spec,
            dim,
            rows: HogwildVec::from_vec(values),
            adagrad_acc: HogwildVec::zeros(spec.rows() * dim),
        }
    }

    fn offset(&self, id: u32) -> Result<usize> {
        if !self.spec.contains(id) {
            return Err(Error::IdOutOfRange {
                table: self.spec.table_id,
                id,
                start: self.spec.row_start,
                end: self.spec.row_end,
            });
        }
        Ok((id - self.spec.row_start) as usize * self.dim)
    }
}

/// Partial pooling result of one shard.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialPool<T> {
    pub sum: Vec<T>,
    pub count: usize,
}

/// Server-side partial pooling: sum of the addressed rows (multiset
/// semantics, ids summed in the order given) and their count. The mean is
/// finalized at combine time.
pub fn lookup_pooled<T: AtomicScalar>(
    shard: &EmbeddingShard<T>,
    ids: &[u32],
    _mode: PoolMode,
) -> Result<PartialPool<T>> {
    let mut sum = vec![T::zero(); shard.dim];
    for &id in ids {
        let off = shard.offset(id)?;
        for k in 0..shard.dim {
            sum[k] += shard.rows.get(off + k);
        }
    }
    Ok(PartialPool { sum, count: ids.len() })
}

/// Overall pooling of the partial results, in the order given.
/// Sum mode returns the sum of sums; mean mode divides by the total count.
/// A total count of zero yields the zero vector.
pub fn combine_partials<T: Scalar>(partials: &[PartialPool<T>], mode: PoolMode) -> Result<Vec<T>> {
    let dim = partials
        .first()
        .map(|p| p.sum.len())
        .ok_or_else(|| Error::Protocol("combine_partials needs at least one partial".into()))?;
    let mut out = vec![T::zero(); dim];
    let mut count = 0usize;
    for p in partials {
        if p.sum.len() != dim {
            return Err(Error::Shape {
                tensor: "partial_pool",
                expected: dim.to_string(),
                got: p.sum.len().to_string(),
            });
        }
        for k in 0..dim {
            out[k] += p.sum[k];
        }
        count += p.count;
    }
    if mode == PoolMode::Mean {
        if count == 0 {
            return Ok(vec![T::zero(); dim]);
        }
        let inv = T::one() / T::from_f64(count as f64);
        for v in out.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Per-row Adagrad update, in place, without mutual exclusion.
pub fn apply_embedding_grads<T: AtomicScalar>(
    shard: &EmbeddingShard<T>,
    sparse_grads: &[(u32, Vec<T>)],
    lr: T,
    eps: T,
) -> Result<()> {
    for (id, grad) in sparse_grads {
        let off = shard.offset(*id)?;
        if grad.len() != shard.dim {
            return Err(Error::Shape {
                tensor: "embedding_grad",
                expected: shard.dim.to_string(),
                got: grad.len().to_string(),
            });
        }
        for (k, &g) in grad.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let i = off + k;
            let acc = shard.adagrad_acc.get(i) + g * g;
            shard.adagrad_acc.set(i, acc);
            let v = shard.rows.get(i) - lr * g / (acc + eps).sqrt();
            shard.rows.set(i, v);
        }
    }
    Ok(())
}

/// Route one table lookup across the plan: for each shard holding any of
/// the ids (in combine order), the sub-multiset of ids sorted ascending.
pub fn route_table_ids(plan: &ShardPlan, table: usize, ids: &[u32]) -> Vec<(usize, Vec<u32>)> {
    let mut sorted: Vec<u32> = ids.to_vec();
    sorted.sort_unstable();
    plan.table_shards_in_combine_order(table)
        .into_iter()
        .map(|s| {
            let shard = &plan.shards[s];
            let sub: Vec<u32> = sorted.iter().copied().filter(|&id| shard.contains(id)).collect();
            (s, sub)
        })
        .filter(|(_, sub)| !sub.is_empty())
        .collect()
}

/// Whole unsharded embedding table, used by evaluation and tests.
pub struct FullTable<T> {
    pub dim: usize,
    /// Row-major `[rows x dim]`.
    pub rows: Vec<T>,
}

impl<T: Scalar> FullTable<T> {
    pub fn init(seed: u64, table: usize, num_rows: usize, dim: usize) -> Self {
        let mut rows = Vec::with_capacity(num_rows * dim);
        for r in 0..num_rows as u32 {
            for c in 0..dim {
                rows.push(init_embedding_value(seed, table, r, c, dim));
            }
        }
        FullTable { dim, rows }
    }

    /// Flat pooled lookup: ids summed ascending, single group.
    pub fn pooled(&self, ids: &[u32], mode: PoolMode) -> Vec<T> {
        let mut sorted: Vec<u32> = ids.to_vec();
        sorted.sort_unstable();
        let mut out = vec![T::zero(); self.dim];
        for &id in &sorted {
            let off = id as usize * self.dim;
            for k in 0..self.dim {
                out[k] += self.rows[off + k];
            }
        }
        if mode == PoolMode::Mean && !sorted.is_empty() {
            let inv = T::one() / T::from_f64(sorted.len() as f64);
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        out
    }
}

/// Reassemble the full tables from a set of shards (end-of-run export).
pub fn assemble_tables<T: AtomicScalar>(
    arch: &ModelArch,
    shards: &[Arc<EmbeddingShard<T>>],
) -> Vec<FullTable<T>> {
    let mut tables: Vec<FullTable<T>> = (0..arch.num_tables)
        .map(|_| FullTable {
            dim: arch.embedding_dim,
            rows: vec![T::zero(); arch.rows_per_table * arch.embedding_dim],
        })
        .collect();
    for shard in shards {
        let t = &mut tables[shard.spec.table_id];
        for r in 0..shard.spec.rows() {
            let dst = (shard.spec.row_start as usize + r) * shard.dim;
            for c in 0..shard.dim {
                t.rows[dst + c] = shard.rows.get(r * shard.dim + c);
            }
        }
    }
    tables
}
