//! Reference implementations the integration tests check the crate
//! against: a plain scalar-loop model (no shared state, no transport, no
//! sharding), a straight-line single-threaded trainer, central finite
//! differences, and exhaustive bin packing.

#![allow(dead_code)]

use bgsync::data::{DataSpec, generate_example_unchecked};
use bgsync::hash::{hash3, to_range};
use bgsync::model::ModelArch;

/// Flat-vector offsets of one dense layer, derived from the dims alone.
#[derive(Debug, Clone, Copy)]
pub struct RefLayer {
    pub w_off: usize,
    pub b_off: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Independently derived parameter layout: bottom layers then top layers,
/// each laid out as row-major weights followed by biases.
pub fn ref_layers(arch: &ModelArch) -> (Vec<RefLayer>, Vec<RefLayer>, usize) {
    let mut off = 0;
    let mut mk = |in_dim: usize, out_dim: usize| {
        let l = RefLayer { w_off: off, b_off: off + in_dim * out_dim, in_dim, out_dim };
        off += in_dim * out_dim + out_dim;
        l
    };
    let mut bottom = Vec::new();
    let mut prev = arch.dense_in_dim;
    for &w in &arch.bottom_mlp_dims {
        bottom.push(mk(prev, w));
        prev = w;
    }
    let nf = arch.num_tables + 1;
    let mut top = Vec::new();
    prev = arch.embedding_dim + nf * (nf - 1) / 2;
    for &w in &arch.top_mlp_dims {
        top.push(mk(prev, w));
        prev = w;
    }
    (bottom, top, off)
}

pub fn ref_param_count(arch: &ModelArch) -> usize {
    ref_layers(arch).2
}

/// Matches the crate's dense init convention: per layer, weights are
/// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) hashed from (seed, layer
/// stream, flat index); biases zero.
pub fn ref_init_dense(arch: &ModelArch, seed: u64) -> Vec<f64> {
    let (bottom, top, len) = ref_layers(arch);
    let mut params = vec![0.0; len];
    for (li, l) in bottom.iter().chain(top.iter()).enumerate() {
        let bound = 1.0 / (l.in_dim as f64).sqrt();
        for k in 0..l.in_dim * l.out_dim {
            params[l.w_off + k] = to_range(hash3(seed, 0x11 + li as u64, k as u64), -bound, bound);
        }
    }
    params
}

/// Matches the crate's embedding init convention.
pub fn ref_init_table(arch: &ModelArch, seed: u64, table: usize) -> Vec<f64> {
    let dim = arch.embedding_dim;
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rows = vec![0.0; arch.rows_per_table * dim];
    for (i, v) in rows.iter_mut().enumerate() {
        *v = to_range(hash3(seed, 0x500 + table as u64, i as u64), -bound, bound);
    }
    rows
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn clamp_prob(p: f64) -> f64 {
    p.max(1e-7).min(1.0 - 1e-7)
}

/// Everything the reference forward pass computes, batch-major.
pub struct RefForward {
    pub bottom_acts: Vec<Vec<f64>>,
    pub top_in: Vec<f64>,
    pub top_acts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn ref_layer_forward(params: &[f64], l: &RefLayer, input: &[f64], batch: usize, relu: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * l.out_dim];
    for e in 0..batch {
        for o in 0..l.out_dim {
            let mut z = params[l.b_off + o];
            for k in 0..l.in_dim {
                z += params[l.w_off + o * l.in_dim + k] * input[e * l.in_dim + k];
            }
            out[e * l.out_dim + o] = if relu && z < 0.0 { 0.0 } else { z };
        }
    }
    out
}

/// Scalar-loop forward: bottom MLP (all ReLU), pairwise dot interactions
/// among {bottom output, pooled tables} in lexicographic pair order
/// appended to the bottom output, top MLP (ReLU except the final layer),
/// sigmoid clamped into [1e-7, 1 - 1e-7].
pub fn ref_forward(
    arch: &ModelArch,
    params: &[f64],
    pooled: &[Vec<f64>],
    dense_x: &[f64],
    batch: usize,
) -> RefForward {
    let (bottom, top, _) = ref_layers(arch);
    let dim = arch.embedding_dim;
    let nf = arch.num_tables + 1;

    let mut bottom_acts: Vec<Vec<f64>> = Vec::new();
    let mut input = dense_x.to_vec();
    for l in &bottom {
        let out = ref_layer_forward(params, l, &input, batch, true);
        input = out.clone();
        bottom_acts.push(out);
    }
    let bottom_out = bottom_acts.last().unwrap().clone();

    let top_in_dim = dim + nf * (nf - 1) / 2;
    let mut top_in = vec![0.0; batch * top_in_dim];
    for e in 0..batch {
        for k in 0..dim {
            top_in[e * top_in_dim + k] = bottom_out[e * dim + k];
        }
        let feat = |i: usize, k: usize| -> f64 {
            if i == 0 {
                bottom_out[e * dim + k]
            } else {
                pooled[i - 1][e * dim + k]
            }
        };
        let mut w = dim;
        for i in 0..nf {
            for j in i + 1..nf {
                let mut d = 0.0;
                for k in 0..dim {
                    d += feat(i, k) * feat(j, k);
                }
                top_in[e * top_in_dim + w] = d;
                w += 1;
            }
        }
    }

    let mut top_acts: Vec<Vec<f64>> = Vec::new();
    let mut input = top_in.clone();
    for (li, l) in top.iter().enumerate() {
        let out = ref_layer_forward(params, l, &input, batch, li + 1 < top.len());
        input = out.clone();
        top_acts.push(out);
    }
    let logits = top_acts.last().unwrap().clone();
    let probs = logits.iter().map(|&z| clamp_prob(sigmoid(z))).collect();
    RefForward { bottom_acts, top_in, top_acts, logits, probs }
}

pub fn ref_loss(probs: &[f64], labels: &[u8]) -> f64 {
    let mut s = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = clamp_prob(p);
        s -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    s / labels.len() as f64
}

/// Scalar-loop backward of the mean log-loss. Returns the dense gradient
/// and, per table, d(loss)/d(pooled vector) per example.
pub fn ref_backward(
    arch: &ModelArch,
    params: &[f64],
    pooled: &[Vec<f64>],
    dense_x: &[f64],
    fwd: &RefForward,
    labels: &[u8],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (bottom, top, len) = ref_layers(arch);
    let dim = arch.embedding_dim;
    let nf = arch.num_tables + 1;
    let batch = labels.len();
    let inv_n = 1.0 / batch as f64;
    let mut grads = vec![0.0; len];

    let mut delta: Vec<f64> = fwd
        .logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| (sigmoid(z) - y as f64) * inv_n)
        .collect();

    let layer_backward = |l: &RefLayer, input: &[f64], delta: &[f64], grads: &mut [f64]| -> Vec<f64> {
        let mut dinput = vec![0.0; batch * l.in_dim];
        for e in 0..batch {
            for o in 0..l.out_dim {
                let g = delta[e * l.out_dim + o];
                if g == 0.0 {
                    continue;
                }
                for k in 0..l.in_dim {
                    grads[l.w_off + o * l.in_dim + k] += g * input[e * l.in_dim + k];
                    dinput[e * l.in_dim + k] += g * params[l.w_off + o * l.in_dim + k];
                }
                grads[l.b_off + o] += g;
            }
        }
        dinput
    };
    let relu_mask = |delta: &mut [f64], act: &[f64]| {
        for (d, &a) in delta.iter_mut().zip(act) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
    };

    for (li, l) in top.iter().enumerate().rev() {
        let input: &[f64] = if li == 0 { &fwd.top_in } else { &fwd.top_acts[li - 1] };
        let mut dinput = layer_backward(l, input, &delta, &mut grads);
        if li > 0 {
            relu_mask(&mut dinput, &fwd.top_acts[li - 1]);
        }
        delta = dinput;
    }

    let top_in_dim = dim + nf * (nf - 1) / 2;
    let bottom_out = fwd.bottom_acts.last().unwrap();
    let mut d_bottom_out = vec![0.0; batch * dim];
    let mut pooled_grads = vec![vec![0.0; batch * dim]; arch.num_tables];
    for e in 0..batch {
        for k in 0..dim {
            d_bottom_out[e * dim + k] += delta[e * top_in_dim + k];
        }
        let feat = |i: usize, k: usize| -> f64 {
            if i == 0 {
                bottom_out[e * dim + k]
            } else {
                pooled[i - 1][e * dim + k]
            }
        };
        let mut w = dim;
        for i in 0..nf {
            for j in i + 1..nf {
                let g = delta[e * top_in_dim + w];
                w += 1;
                if g == 0.0 {
                    continue;
                }
                for k in 0..dim {
                    if i == 0 {
                        d_bottom_out[e * dim + k] += g * feat(j, k);
                    } else {
                        pooled_grads[i - 1][e * dim + k] += g * feat(j, k);
                    }
                    pooled_grads[j - 1][e * dim + k] += g * feat(i, k);
                }
            }
        }
    }

    let mut delta = d_bottom_out;
    relu_mask(&mut delta, bottom_out);
    for (li, l) in bottom.iter().enumerate().rev() {
        let input: &[f64] = if li == 0 { dense_x } else { &fwd.bottom_acts[li - 1] };
        let mut dinput = layer_backward(l, input, &delta, &mut grads);
        if li > 0 {
            relu_mask(&mut dinput, &fwd.bottom_acts[li - 1]);
        }
        delta = dinput;
    }
    (grads, pooled_grads)
}

fn adagrad(value: &mut f64, acc: &mut f64, g: f64, lr: f64, eps: f64) {
    if g == 0.0 {
        return;
    }
    *acc += g * g;
    *value -= lr * g / (*acc + eps).sqrt();
}

/// Reference final model of a straight-line trainer.
pub struct RefTrained {
    pub dense: Vec<f64>,
    pub tables: Vec<Vec<f64>>,
}

/// Straight-line single-threaded training loop: batches in index order,
/// single unsharded table per lookup (ids summed ascending, mean finalized
/// as sum * (1/count)), Adagrad on dense and embedding parameters.
pub fn ref_train(data: &DataSpec, batch_size: usize, lr: f64, eps: f64) -> RefTrained {
    let arch = &data.arch;
    let dim = arch.embedding_dim;
    let mut params = ref_init_dense(arch, data.seed);
    let (_, _, plen) = ref_layers(arch);
    let mut dense_acc = vec![0.0; plen];
    let mut tables: Vec<Vec<f64>> = (0..arch.num_tables).map(|t| ref_init_table(arch, data.seed, t)).collect();
    let mut table_acc: Vec<Vec<f64>> = tables.iter().map(|t| vec![0.0; t.len()]).collect();

    let mut start = 0u64;
    while start < data.num_examples {
        let len = ((data.num_examples - start) as usize).min(batch_size);
        let mut dense_x = Vec::with_capacity(len * arch.dense_in_dim);
        let mut ids: Vec<Vec<Vec<u32>>> = vec![Vec::new(); arch.num_tables];
        let mut labels = Vec::with_capacity(len);
        for i in 0..len as u64 {
            let ex = generate_example_unchecked::<f64>(data, start + i);
            dense_x.extend_from_slice(&ex.dense_x);
            for (t, v) in ex.sparse_ids.into_iter().enumerate() {
                ids[t].push(v);
            }
            labels.push(ex.label);
        }

        // Mean pooling: per example, sum the addressed rows in ascending
        // id order, then scale by the reciprocal count.
        let mut pooled = vec![vec![0.0; len * dim]; arch.num_tables];
        for t in 0..arch.num_tables {
            for e in 0..len {
                let mut sorted = ids[t][e].clone();
                sorted.sort_unstable();
                let mut sum = vec![0.0; dim];
                for &id in &sorted {
                    for k in 0..dim {
                        sum[k] += tables[t][id as usize * dim + k];
                    }
                }
                let inv = 1.0 / sorted.len() as f64;
                for k in 0..dim {
                    pooled[t][e * dim + k] = sum[k] * inv;
                }
            }
        }

        let fwd = ref_forward(arch, &params, &pooled, &dense_x, len);
        let (grads, pooled_grads) = ref_backward(arch, &params, &pooled, &dense_x, &fwd, &labels);

        // Embedding update first, mirroring the send-then-step order of
        // the training loop (disjoint parameters, order immaterial).
        for t in 0..arch.num_tables {
            for e in 0..len {
                let count = ids[t][e].len();
                if count == 0 {
                    continue;
                }
                let inv = 1.0 / count as f64;
                let g: Vec<f64> = (0..dim).map(|k| pooled_grads[t][e * dim + k] * inv).collect();
                for &id in &ids[t][e] {
                    for k in 0..dim {
                        let i = id as usize * dim + k;
                        adagrad(&mut tables[t][i], &mut table_acc[t][i], g[k], lr, eps);
                    }
                }
            }
        }
        for i in 0..plen {
            adagrad(&mut params[i], &mut dense_acc[i], grads[i], lr, eps);
        }
        start += len as u64;
    }
    RefTrained { dense: params, tables }
}

/// Exhaustive minimal makespan by branch and bound (descending costs,
/// least-loaded-first, prune on the incumbent).
pub fn optimal_makespan(costs: &[f64], bins: usize) -> f64 {
    assert!(bins >= 1);
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut loads = vec![0.0; bins];
    let mut best = sorted.iter().sum::<f64>() + 1.0;
    fn go(sorted: &[f64], i: usize, loads: &mut [f64], best: &mut f64) {
        if i == sorted.len() {
            let max = loads.iter().cloned().fold(0.0, f64::max);
            if max < *best {
                *best = max;
            }
            return;
        }
        for b in 0..loads.len() {
            // identical loads are symmetric; keep only the first
            if loads[..b].iter().any(|&l| l == loads[b]) {
                continue;
            }
            if loads[b] + sorted[i] >= *best {
                continue;
            }
            loads[b] += sorted[i];
            go(sorted, i + 1, loads, best);
            loads[b] -= sorted[i];
        }
    }
    go(&sorted, 0, &mut loads, &mut best);
    best
}

/// Deterministic xorshift for test-side randomness.
pub struct TestRng(pub u64);

impl TestRng {
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0.wrapping_add(0x9e3779b97f4a7c15);
        self.0 = x;
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^ (x >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Random small architecture for model-level property checks.
pub fn random_arch(rng: &mut TestRng) -> ModelArch {
    let dim = 2 + rng.below(3);
    ModelArch {
        num_tables: 1 + rng.below(3),
        embedding_dim: dim,
        rows_per_table: 10,
        dense_in_dim: 1 + rng.below(4),
        bottom_mlp_dims: if rng.below(2) == 0 {
            vec![dim]
        } else {
            vec![2 + rng.below(4), dim]
        },
        top_mlp_dims: if rng.below(2) == 0 {
            vec![1]
        } else {
            vec![2 + rng.below(4), 1]
        },
    }
}

/// One random forward/backward problem instance.
pub struct Instance {
    pub arch: ModelArch,
    pub params: Vec<f64>,
    pub pooled: Vec<Vec<f64>>,
    pub dense_x: Vec<f64>,
    pub labels: Vec<u8>,
    pub batch: usize,
}

pub fn random_instance(rng: &mut TestRng) -> Instance {
    let arch = random_arch(rng);
    let batch = 1 + rng.below(4);
    let (_, _, len) = ref_layers(&arch);
    let params: Vec<f64> = (0..len).map(|_| rng.range(-0.5, 0.5)).collect();
    let pooled: Vec<Vec<f64>> = (0..arch.num_tables)
        .map(|_| (0..batch * arch.embedding_dim).map(|_| rng.range(-1.0, 1.0)).collect())
        .collect();
    let dense_x: Vec<f64> =
        (0..batch * arch.dense_in_dim).map(|_| rng.range(-1.0, 1.0)).collect();
    let labels: Vec<u8> = (0..batch).map(|_| (rng.below(2)) as u8).collect();
    Instance { arch, params, pooled, dense_x, labels, batch }
}

fn instance_loss(inst: &Instance, params: &[f64], pooled: &[Vec<f64>]) -> f64 {
    let layout = std::sync::Arc::new(bgsync::model::DenseLayout::new(&inst.arch));
    let (pred, _) =
        bgsync::model::forward(params, &layout, &inst.arch, pooled, &inst.dense_x, inst.batch)
            .unwrap();
    bgsync::model::logistic_loss(&pred, &inst.labels).unwrap()
}

/// Analytic gradients against central finite differences over every dense
/// and pooled coordinate. Returns (meaningful comparisons, worst relative
/// error); coordinates where both sides vanish are skipped as ReLU kinks
/// or dead units.
pub fn fd_gradient_check(inst: &Instance) -> (usize, f64) {
    let h = 1e-5;
    let layout = std::sync::Arc::new(bgsync::model::DenseLayout::new(&inst.arch));
    let (_, cache) = bgsync::model::forward(
        &inst.params,
        &layout,
        &inst.arch,
        &inst.pooled,
        &inst.dense_x,
        inst.batch,
    )
    .unwrap();
    let (grads, pooled_grads) = bgsync::model::backward(&cache, &inst.labels).unwrap();
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);

    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for i in 0..inst.params.len() {
        let mut up = inst.params.clone();
        let mut dn = inst.params.clone();
        up[i] += h;
        dn[i] -= h;
        let fd =
            (instance_loss(inst, &up, &inst.pooled) - instance_loss(inst, &dn, &inst.pooled))
                / (2.0 * h);
        if grads.values[i] == 0.0 && fd.abs() < 1e-7 {
            continue;
        }
        worst = worst.max(rel(grads.values[i], fd));
        checked += 1;
    }
    for t in 0..inst.arch.num_tables {
        for i in 0..inst.pooled[t].len() {
            let mut up = inst.pooled.clone();
            let mut dn = inst.pooled.clone();
            up[t][i] += h;
            dn[t][i] -= h;
            let fd = (instance_loss(inst, &inst.params, &up)
                - instance_loss(inst, &inst.params, &dn))
                / (2.0 * h);
            if pooled_grads[t][i] == 0.0 && fd.abs() < 1e-7 {
                continue;
            }
            worst = worst.max(rel(pooled_grads[t][i], fd));
            checked += 1;
        }
    }
    (checked, worst)
}

/// A random plan: each table cut at random boundaries, shards assigned to
/// random PSs.
pub fn random_plan(
    rng: &mut TestRng,
    tables: usize,
    rows: u32,
    num_ps: usize,
) -> bgsync::embedding::ShardPlan {
    use bgsync::embedding::{ShardPlan, ShardSpec};
    let mut shards = Vec::new();
    for t in 0..tables {
        let cuts = 1 + rng.below(3.min(rows as usize));
        let mut bounds: Vec<u32> =
            (0..cuts - 1).map(|_| 1 + rng.below(rows as usize - 1) as u32).collect();
        bounds.push(0);
        bounds.push(rows);
        bounds.sort_unstable();
        bounds.dedup();
        for w in bounds.windows(2) {
            shards.push(ShardSpec { table_id: t, row_start: w[0], row_end: w[1] });
        }
    }
    let assignments: Vec<usize> = (0..shards.len()).map(|_| rng.below(num_ps)).collect();
    ShardPlan { shards, assignments, per_ps_cost: vec![0.0; num_ps] }
}

/// Build an embedding tier over an explicit plan (no transport knobs).
pub fn tier_for_plan(
    plan: bgsync::embedding::ShardPlan,
    dim: usize,
    seed: u64,
    num_ps: usize,
) -> bgsync::runtime::EmbeddingTier<f64> {
    use std::sync::Arc;
    let plan = Arc::new(plan);
    let nodes = (0..num_ps)
        .map(|ps| {
            let shards = plan
                .shards
                .iter()
                .zip(&plan.assignments)
                .filter(|(_, &a)| a == ps)
                .map(|(s, _)| Arc::new(bgsync::embedding::EmbeddingShard::init(*s, dim, seed)))
                .collect();
            Arc::new(bgsync::runtime::EmbeddingPsNode::new(
                bgsync::transport::Endpoint::new(format!("ps{}", ps), 0.0, None, 4),
                shards,
                0.1,
                1e-8,
            ))
        })
        .collect();
    bgsync::runtime::EmbeddingTier { plan, nodes }
}

/// Unsharded pooling oracle that follows the fixed combine order: per
/// shard sum its ids ascending, PS-local partials summed per PS, then the
/// cross-PS combine.
pub fn oracle_pooled(
    plan: &bgsync::embedding::ShardPlan,
    table: &bgsync::embedding::FullTable<f64>,
    table_id: usize,
    ids: &[u32],
    mode: bgsync::embedding::PoolMode,
) -> Vec<f64> {
    use bgsync::embedding::{PartialPool, PoolMode, combine_partials, route_table_ids};
    let routed = route_table_ids(plan, table_id, ids);
    let mut per_ps: Vec<(usize, Vec<PartialPool<f64>>)> = Vec::new();
    for (shard_idx, sub) in routed {
        let ps = plan.assignments[shard_idx];
        let mut sum = vec![0.0; table.dim];
        for &id in &sub {
            for k in 0..table.dim {
                sum[k] += table.rows[id as usize * table.dim + k];
            }
        }
        let partial = PartialPool { sum, count: sub.len() };
        match per_ps.last_mut() {
            Some((last, list)) if *last == ps => list.push(partial),
            _ => per_ps.push((ps, vec![partial])),
        }
    }
    if per_ps.is_empty() {
        return vec![0.0; table.dim];
    }
    let ps_level: Vec<PartialPool<f64>> = per_ps
        .into_iter()
        .map(|(_, list)| {
            let count = list.iter().map(|p| p.count).sum();
            PartialPool { sum: combine_partials(&list, PoolMode::Sum).unwrap(), count }
        })
        .collect();
    combine_partials(&ps_level, mode).unwrap()
}
