//! Process topology and execution engine: master orchestration, trainer
//! worker roles, the shadow role, and the embedding PS roles, all as
//! concurrent activities inside one process over the in-process transport.
//!
//! Per trainer, `workers_per_trainer` worker roles and one shadow role
//! share a single `DenseParams` replica under the Hogwild contract. The
//! reader cursor is one atomic counter, so the one-pass property holds for
//! every role arrangement.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::data::{Batch, DataSpec, OnePassReader};
use crate::embedding::{
    self, EmbeddingShard, PoolMode, ShardPlan, apply_embedding_grads, combine_partials,
    lookup_pooled, profile_and_partition, profile_costs, route_table_ids,
};
use crate::error::{Error, Result};
use crate::harness::{NeAccumulator, RunMetrics};
use crate::model::{
    DenseGrads, DenseLayout, DenseParams, adagrad_step, backward, forward, init_dense,
};
use crate::num::AtomicScalar;
use crate::sync::{
    AllReduceGroup, BmufState, MaState, Placement, SyncAlgorithm, SyncConfig, SyncPsGroup,
    bmuf_sync, easgd_sync, ma_sync, should_sync_foreground,
};
use crate::transport::{self, DEFAULT_SERVER_WORKERS, Endpoint};

pub const DEFAULT_ADAGRAD_EPS: f64 = 1e-8;

/// Cluster topology and transport-injection knobs.
///
/// `transport_latency_ms` and `ps_bandwidth_cap` apply to the sync PS
/// endpoints (the saturation under study); the embedding-side knobs are
/// separate and default to off.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub num_trainers: usize,
    pub workers_per_trainer: usize,
    pub num_embedding_ps: usize,
    pub num_sync_ps: usize,
    pub batch_size: usize,
    pub transport_latency_ms: f64,
    pub ps_bandwidth_cap: Option<f64>,
    pub embedding_latency_ms: f64,
    pub embedding_bandwidth_cap: Option<f64>,
    pub server_workers: usize,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            num_trainers: 1,
            workers_per_trainer: 4,
            num_embedding_ps: 1,
            num_sync_ps: 1,
            batch_size: 100,
            transport_latency_ms: 0.0,
            ps_bandwidth_cap: None,
            embedding_latency_ms: 0.0,
            embedding_bandwidth_cap: None,
            server_workers: DEFAULT_SERVER_WORKERS,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self, sync: Option<&SyncConfig>) -> Result<()> {
        if self.num_trainers == 0
            || self.workers_per_trainer == 0
            || self.num_embedding_ps == 0
            || self.batch_size == 0
        {
            return Err(Error::InvalidConfig(
                "trainers, workers, embedding PSs and batch size must all be >= 1".into(),
            ));
        }
        if self.transport_latency_ms < 0.0 || self.embedding_latency_ms < 0.0 {
            return Err(Error::InvalidConfig("latency must be >= 0".into()));
        }
        if let Some(cfg) = sync {
            cfg.validate()?;
            if cfg.algorithm == SyncAlgorithm::Easgd && self.num_sync_ps == 0 {
                return Err(Error::InvalidConfig(
                    "EASGD requires at least one sync PS".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Wire messages accepted by an embedding PS.
#[derive(Debug, Clone)]
pub enum EmbeddingRequest<T> {
    LookupPooled {
        table: usize,
        ids: Vec<u32>,
        mode: PoolMode,
    },
    ApplyGrads {
        table: usize,
        grads: Vec<(u32, Vec<T>)>,
    },
}

impl<T> EmbeddingRequest<T> {
    pub fn payload_bytes(&self) -> u64 {
        const HEADER: u64 = 16;
        match self {
            EmbeddingRequest::LookupPooled { ids, .. } => HEADER + 4 * ids.len() as u64,
            EmbeddingRequest::ApplyGrads { grads, .. } => {
                HEADER
                    + grads
                        .iter()
                        .map(|(_, g)| 4 + (g.len() * std::mem::size_of::<T>()) as u64)
                        .sum::<u64>()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum EmbeddingReply<T> {
    Pooled(embedding::PartialPool<T>),
    Ack,
}

/// One embedding PS role: an endpoint plus its hosted shards.
pub struct EmbeddingPsNode<T: AtomicScalar> {
    pub endpoint: Endpoint,
    /// Shards hosted here, ascending (table_id, row_start).
    pub shards: Vec<Arc<EmbeddingShard<T>>>,
    lr: T,
    eps: T,
}

impl<T: AtomicScalar> EmbeddingPsNode<T> {
    pub fn new(endpoint: Endpoint, mut shards: Vec<Arc<EmbeddingShard<T>>>, lr: T, eps: T) -> Self {
        shards.sort_by_key(|s| (s.spec.table_id, s.spec.row_start));
        EmbeddingPsNode { endpoint, shards, lr, eps }
    }

    /// Request handler. Lookups pool locally across all hosted shards of
    /// the table (ascending row ranges) into one partial result.
    pub fn handle(&self, req: &EmbeddingRequest<T>) -> Result<EmbeddingReply<T>> {
        match req {
            EmbeddingRequest::LookupPooled { table, ids, mode } => {
                let mut partials = Vec::new();
                let mut remaining = ids.len();
                for shard in self.shards.iter().filter(|s| s.spec.table_id == *table) {
                    let sub: Vec<u32> =
                        ids.iter().copied().filter(|&id| shard.spec.contains(id)).collect();
                    if sub.is_empty() {
                        continue;
                    }
                    remaining -= sub.len();
                    partials.push(lookup_pooled(shard, &sub, *mode)?);
                }
                if remaining != 0 {
                    return Err(Error::Protocol(format!(
                        "{} ids routed to the wrong PS for table {}",
                        remaining, table
                    )));
                }
                if partials.is_empty() {
                    return Ok(EmbeddingReply::Pooled(embedding::PartialPool {
                        sum: vec![T::zero(); self.shards[0].dim],
                        count: 0,
                    }));
                }
                // Local partial pooling: always sum-combine here, the mean
                // (if any) is finalized at the trainer.
                let sum = combine_partials(&partials, PoolMode::Sum)?;
                let count = partials.iter().map(|p| p.count).sum();
                Ok(EmbeddingReply::Pooled(embedding::PartialPool { sum, count }))
            }
            EmbeddingRequest::ApplyGrads { table, grads } => {
                for (id, g) in grads {
                    let shard = self
                        .shards
                        .iter()
                        .find(|s| s.spec.table_id == *table && s.spec.contains(*id))
                        .ok_or(Error::IdOutOfRange {
                            table: *table,
                            id: *id,
                            start: 0,
                            end: 0,
                        })?;
                    apply_embedding_grads(shard, std::slice::from_ref(&(*id, g.clone())), self.lr, self.eps)?;
                }
                Ok(EmbeddingReply::Ack)
            }
        }
    }
}

/// The placed embedding tier: plan plus PS nodes.
pub struct EmbeddingTier<T: AtomicScalar> {
    pub plan: Arc<ShardPlan>,
    pub nodes: Vec<Arc<EmbeddingPsNode<T>>>,
}

impl<T: AtomicScalar> EmbeddingTier<T> {
    pub fn build(data: &DataSpec, cluster: &ClusterSpec, lr: T, eps: T) -> Result<Self> {
        let arch = &data.arch;
        let shards = embedding::plan_shards(arch, cluster.num_embedding_ps);
        let costs = profile_costs(data, &shards, embedding::default_warmup(data.num_examples));
        let plan = Arc::new(profile_and_partition(&shards, &costs, cluster.num_embedding_ps)?);
        let nodes = (0..cluster.num_embedding_ps)
            .map(|ps_id| {
                let owned: Vec<Arc<EmbeddingShard<T>>> = plan
                    .shards
                    .iter()
                    .zip(&plan.assignments)
                    .filter(|(_, &a)| a == ps_id)
                    .map(|(spec, _)| {
                        Arc::new(EmbeddingShard::init(*spec, arch.embedding_dim, data.seed))
                    })
                    .collect();
                Arc::new(EmbeddingPsNode::new(
                    Endpoint::new(
                        format!("emb-ps{}", ps_id),
                        cluster.embedding_latency_ms,
                        cluster.embedding_bandwidth_cap,
                        cluster.server_workers,
                    ),
                    owned,
                    lr,
                    eps,
                ))
            })
            .collect();
        Ok(EmbeddingTier { plan, nodes })
    }

    pub fn all_shards(&self) -> Vec<Arc<EmbeddingShard<T>>> {
        self.nodes.iter().flat_map(|n| n.shards.iter().cloned()).collect()
    }

    pub fn stop(&self) {
        for n in &self.nodes {
            n.endpoint.stop();
        }
    }

    /// Pooled lookup of one example's ids for one table, routed across the
    /// PS nodes in the fixed combine order (ascending ps_id, ascending id).
    pub fn pooled_lookup(&self, table: usize, ids: &[u32], mode: PoolMode) -> Result<Vec<T>> {
        let routed = route_table_ids(&self.plan, table, ids);
        // Group the routed shards by ps_id, preserving combine order.
        let mut per_ps: Vec<(usize, Vec<u32>)> = Vec::new();
        for (shard_idx, sub) in routed {
            let ps_id = self.plan.assignments[shard_idx];
            match per_ps.last_mut() {
                Some((last_ps, acc)) if *last_ps == ps_id => acc.extend(sub),
                _ => per_ps.push((ps_id, sub)),
            }
        }
        let mut partials = Vec::new();
        for (ps_id, sub) in &per_ps {
            let node = &self.nodes[*ps_id];
            let req = EmbeddingRequest::LookupPooled {
                table,
                ids: sub.clone(),
                mode: *mode_for_wire(mode),
            };
            let reply = transport::send_with_retry(&node.endpoint, req.payload_bytes(), true, || {
                node.handle(&req)
            })??;
            match reply {
                EmbeddingReply::Pooled(p) => partials.push(p),
                EmbeddingReply::Ack => {
                    return Err(Error::Protocol("unexpected Ack for lookup".into()));
                }
            }
        }
        if partials.is_empty() {
            let dim = self
                .nodes
                .iter()
                .flat_map(|n| n.shards.first())
                .map(|s| s.dim)
                .next()
                .unwrap_or(0);
            partials.push(embedding::PartialPool { sum: vec![T::zero(); dim], count: 0 });
        }
        combine_partials(&partials, mode)
    }
}

fn mode_for_wire(mode: PoolMode) -> &'static PoolMode {
    match mode {
        PoolMode::Sum => &PoolMode::Sum,
        PoolMode::Mean => &PoolMode::Mean,
    }
}

/// Per-trainer synchronization state.
pub enum Syncer<T: AtomicScalar> {
    None,
    Easgd {
        group: Arc<SyncPsGroup<T>>,
        alpha: T,
    },
    Ma {
        group: Arc<AllReduceGroup<T>>,
        state: Mutex<MaState<T>>,
        alpha: T,
    },
    Bmuf {
        group: Arc<AllReduceGroup<T>>,
        state: Mutex<BmufState<T>>,
        eta: T,
        alpha: T,
        momentum: T,
    },
}

impl<T: AtomicScalar> Syncer<T> {
    pub fn is_none(&self) -> bool {
        matches!(self, Syncer::None)
    }

    fn uses_rendezvous(&self) -> bool {
        matches!(self, Syncer::Ma { .. } | Syncer::Bmuf { .. })
    }

    /// One sync round. Returns true iff all peers flagged `stopping`
    /// (EASGD has no peers; it reports `stopping` back).
    pub fn round(&self, rank: usize, params: &DenseParams<T>, stopping: bool) -> Result<bool> {
        match self {
            Syncer::None => Ok(true),
            Syncer::Easgd { group, alpha } => {
                easgd_sync(params, group, *alpha)?;
                Ok(stopping)
            }
            Syncer::Ma { group, state, alpha } => {
                let mut st = state.lock().unwrap();
                ma_sync(params, &mut st, group, rank, *alpha, stopping)
            }
            Syncer::Bmuf {
                group,
                state,
                eta,
                alpha,
                momentum,
            } => {
                let mut st = state.lock().unwrap();
                bmuf_sync(params, &mut st, group, rank, *eta, *alpha, *momentum, stopping)
            }
        }
    }

    fn leave(&self) {
        match self {
            Syncer::Ma { group, .. } | Syncer::Bmuf { group, .. } => group.leave(),
            _ => {}
        }
    }
}

/// One trainer: rank, the single shared dense replica, and sync state.
pub struct Trainer<T: AtomicScalar> {
    pub rank: usize,
    pub params: Arc<DenseParams<T>>,
    pub syncer: Arc<Syncer<T>>,
    pub stop: Arc<AtomicBool>,
}

/// Per-worker statistics returned by the worker loop.
#[derive(Debug, Clone, Default)]
pub struct WorkerStats {
    pub iterations: u64,
    pub examples: u64,
    pub ne: NeAccumulator,
    pub stall_seconds: f64,
    pub sync_rounds: u64,
    pub sync_aborted: u64,
}

/// Shadow-role statistics.
#[derive(Debug, Clone, Default)]
pub struct ShadowStats {
    pub rounds: u64,
    pub aborted: u64,
}

/// Everything a worker role needs, shared across threads.
pub struct Shared<T: AtomicScalar> {
    pub data: Arc<DataSpec>,
    pub layout: Arc<DenseLayout>,
    pub reader: Arc<OnePassReader>,
    pub embedding: Arc<EmbeddingTier<T>>,
    pub pool_mode: PoolMode,
    pub lr: T,
    pub adagrad_eps: T,
    /// Foreground sync gap; `None` for shadow placement or no sync.
    pub foreground_gap: Option<u64>,
}

fn pooled_for_batch<T: AtomicScalar>(
    shared: &Shared<T>,
    batch: &Batch<T>,
) -> Result<Vec<Vec<T>>> {
    let arch = &shared.data.arch;
    let dim = arch.embedding_dim;
    let mut pooled = vec![vec![T::zero(); batch.len * dim]; arch.num_tables];
    for t in 0..arch.num_tables {
        for e in 0..batch.len {
            let v = shared
                .embedding
                .pooled_lookup(t, &batch.sparse_ids[t][e], shared.pool_mode)?;
            pooled[t][e * dim..(e + 1) * dim].copy_from_slice(&v);
        }
    }
    Ok(pooled)
}

fn scatter_embedding_grads<T: AtomicScalar>(
    shared: &Shared<T>,
    batch: &Batch<T>,
    pooled_grads: &[Vec<T>],
) -> Result<()> {
    let arch = &shared.data.arch;
    let dim = arch.embedding_dim;
    // Build one ApplyGrads message per (ps, table), examples ascending,
    // ids in their original order within an example.
    let num_ps = shared.embedding.nodes.len();
    for t in 0..arch.num_tables {
        let mut per_ps: Vec<Vec<(u32, Vec<T>)>> = vec![Vec::new(); num_ps];
        for e in 0..batch.len {
            let ids = &batch.sparse_ids[t][e];
            if ids.is_empty() {
                continue;
            }
            let mut g: Vec<T> = pooled_grads[t][e * dim..(e + 1) * dim].to_vec();
            if shared.pool_mode == PoolMode::Mean {
                let inv = T::one() / T::from_f64(ids.len() as f64);
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            for &id in ids {
                let ps = owning_ps(&shared.embedding.plan, t, id)?;
                per_ps[ps].push((id, g.clone()));
            }
        }
        for (ps_id, grads) in per_ps.into_iter().enumerate() {
            if grads.is_empty() {
                continue;
            }
            let node = &shared.embedding.nodes[ps_id];
            let req = EmbeddingRequest::ApplyGrads { table: t, grads };
            // Fire-and-acknowledge: no latency stall for the worker, but the
            // bytes still debit the PS bandwidth clock.
            transport::send_with_retry(&node.endpoint, req.payload_bytes(), false, || {
                node.handle(&req)
            })??;
        }
    }
    Ok(())
}

fn owning_ps(plan: &ShardPlan, table: usize, id: u32) -> Result<usize> {
    for (s, spec) in plan.shards.iter().enumerate() {
        if spec.table_id == table && spec.contains(id) {
            return Ok(plan.assignments[s]);
        }
    }
    Err(Error::IdOutOfRange {
        table,
        id,
        start: 0,
        end: 0,
    })
}

/// Worker role: fetch batch, look up pooled embeddings, forward, record
/// progressive train NE, backward, send embedding grads, local Adagrad
/// step; foreground placement additionally syncs inline every k
/// iterations, stalling this worker for the duration.
pub fn run_worker_loop<T: AtomicScalar>(
    shared: &Shared<T>,
    trainer: &Trainer<T>,
    fg_participant: bool,
) -> Result<WorkerStats> {
    let mut stats = WorkerStats::default();
    let arch = &shared.data.arch;
    while let Some(batch) = shared.reader.next_batch::<T>() {
        let pooled = pooled_for_batch(shared, &batch)?;
        let snapshot = trainer.params.snapshot();
        let (pred, cache) = forward(&snapshot, &shared.layout, arch, &pooled, &batch.dense_x, batch.len)?;
        // Progressive validation: score the incoming batch before the
        // parameter update it causes.
        stats.ne.record(&pred, &batch.labels);
        let (grads, pooled_grads) = backward(&cache, &batch.labels)?;
        scatter_embedding_grads(shared, &batch, &pooled_grads)?;
        adagrad_step(&trainer.params, &DenseGrads { values: grads.values }, shared.lr, shared.adagrad_eps);
        stats.iterations += 1;
        stats.examples += batch.len as u64;
        if let Some(k) = shared.foreground_gap {
            if fg_participant && should_sync_foreground(stats.iterations, k) {
                let t0 = Instant::now();
                match trainer.syncer.round(trainer.rank, &trainer.params, false) {
                    Ok(_) => stats.sync_rounds += 1,
                    Err(_) => stats.sync_aborted += 1,
                }
                stats.stall_seconds += t0.elapsed().as_secs_f64();
            }
        }
    }
    Ok(stats)
}

/// Shadow role: loop sync rounds independently of the workers, sleeping
/// `pacing_ms` between rounds, until the stop flag is raised. Rendezvous
/// algorithms agree on a common final drain round via the stopping flag
/// piggybacked on the reduction.
pub fn run_shadow_loop<T: AtomicScalar>(
    trainer: &Trainer<T>,
    pacing: Duration,
) -> ShadowStats {
    let mut stats = ShadowStats::default();
    loop {
        if !trainer.stop.load(Ordering::Relaxed) {
            sleep_paced(&trainer.stop, pacing);
        }
        let stopping = trainer.stop.load(Ordering::Relaxed);
        // EASGD state is pairwise on the PS; no drain round needed. The
        // rendezvous algorithms run one common final round instead.
        if stopping && !trainer.syncer.uses_rendezvous() {
            break;
        }
        match trainer.syncer.round(trainer.rank, &trainer.params, stopping) {
            Ok(all_stop) => {
                stats.rounds += 1;
                if all_stop {
                    break;
                }
            }
            Err(_) => {
                stats.aborted += 1;
                if stopping {
                    break;
                }
            }
        }
    }
    stats
}

/// Stop-aware sleep in small chunks.
fn sleep_paced(stop: &AtomicBool, total: Duration) {
    let chunk = Duration::from_millis(5);
    let deadline = Instant::now() + total;
    while Instant::now() < deadline {
        if stop.load(Ordering::Relaxed) {
            return;
        }
        std::thread::sleep(chunk.min(deadline - Instant::now()));
    }
}

/// Training options beyond the cluster/sync/data specs.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub adagrad_eps: f64,
    pub pool_mode: PoolMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 0.05,
            adagrad_eps: DEFAULT_ADAGRAD_EPS,
            pool_mode: PoolMode::Mean,
        }
    }
}

/// Final model plus run counters.
pub struct TrainOutput<T: AtomicScalar> {
    /// Trainer-0 dense replica at the end of the run.
    pub dense: Vec<T>,
    /// All dense replicas (for consensus checks).
    pub replicas: Vec<Vec<T>>,
    pub tables: Vec<embedding::FullTable<T>>,
    pub metrics: RunMetrics,
}

/// Master orchestration: build the shard plan, initialize every role from
/// the shared seed, launch workers and shadows, wait for data exhaustion,
/// raise stop flags, and return the trainer-0 replica with the embeddings.
pub fn run_training<T: AtomicScalar>(
    cluster: &ClusterSpec,
    sync: Option<&SyncConfig>,
    data: &DataSpec,
    opts: &TrainOptions,
) -> Result<TrainOutput<T>> {
    cluster.validate(sync)?;
    data.validate()?;
    let arch = &data.arch;
    let layout = Arc::new(DenseLayout::new(arch));
    let w0: Vec<T> = init_dense(arch, &layout, data.seed);
    let lr = T::from_f64(opts.lr);
    let eps = T::from_f64(opts.adagrad_eps);

    let embedding = Arc::new(EmbeddingTier::<T>::build(data, cluster, lr, eps)?);
    let reader = Arc::new(OnePassReader::new(Arc::new(data.clone()), cluster.batch_size));

    let sync_ps: Option<Arc<SyncPsGroup<T>>> = match sync {
        Some(cfg) if cfg.algorithm == SyncAlgorithm::Easgd => Some(Arc::new(SyncPsGroup::init(
            &w0,
            cluster.num_sync_ps.max(1),
            cluster.transport_latency_ms,
            cluster.ps_bandwidth_cap,
            cluster.server_workers,
        ))),
        _ => None,
    };
    let allreduce: Option<Arc<AllReduceGroup<T>>> = match sync {
        Some(cfg) if cfg.algorithm != SyncAlgorithm::Easgd => {
            Some(Arc::new(AllReduceGroup::new(cluster.num_trainers)))
        }
        _ => None,
    };

    let trainers: Vec<Arc<Trainer<T>>> = (0..cluster.num_trainers)
        .map(|rank| {
            let params = Arc::new(DenseParams::new(Arc::clone(&layout), w0.clone()));
            let syncer = match sync {
                None => Syncer::None,
                Some(cfg) => match cfg.algorithm {
                    SyncAlgorithm::Easgd => Syncer::Easgd {
                        group: Arc::clone(sync_ps.as_ref().unwrap()),
                        alpha: T::from_f64(cfg.alpha),
                    },
                    SyncAlgorithm::Ma => Syncer::Ma {
                        group: Arc::clone(allreduce.as_ref().unwrap()),
                        state: Mutex::new(MaState::init(&w0)),
                        alpha: T::from_f64(cfg.alpha),
                    },
                    SyncAlgorithm::Bmuf => Syncer::Bmuf {
                        group: Arc::clone(allreduce.as_ref().unwrap()),
                        state: Mutex::new(BmufState::init(&w0)),
                        eta: T::from_f64(cfg.eta),
                        alpha: T::from_f64(cfg.alpha),
                        momentum: T::from_f64(cfg.momentum),
                    },
                },
            };
            Arc::new(Trainer {
                rank,
                params,
                syncer: Arc::new(syncer),
                stop: Arc::new(AtomicBool::new(false)),
            })
        })
        .collect();

    let shared = Arc::new(Shared {
        data: Arc::new(data.clone()),
        layout: Arc::clone(&layout),
        reader,
        embedding: Arc::clone(&embedding),
        pool_mode: opts.pool_mode,
        lr,
        adagrad_eps: eps,
        foreground_gap: match sync {
            Some(cfg) if cfg.placement == Placement::Foreground => Some(cfg.foreground_gap_k),
            _ => None,
        },
    });
    let shadow_placement = matches!(sync, Some(cfg) if cfg.placement == Placement::Shadow);
    let pacing = Duration::from_millis(sync.map(|c| c.pacing_ms).unwrap_or(0));

    let t0 = Instant::now();
    let mut worker_stats: Vec<WorkerStats> = Vec::new();
    let mut shadow_stats: Vec<ShadowStats> = Vec::new();
    let mut wall = 0.0f64;
    let mut run_err: Option<Error> = None;

    std::thread::scope(|s| {
        let mut workers = Vec::new();
        for trainer in &trainers {
            for w in 0..cluster.workers_per_trainer {
                let shared = Arc::clone(&shared);
                let trainer = Arc::clone(trainer);
                // Rendezvous foreground algorithms designate worker 0 of
                // each trainer; EASGD foreground syncs from every worker.
                let fg_participant =
                    !trainer.syncer.uses_rendezvous() || w == 0;
                workers.push(s.spawn(move || {
                    let out = run_worker_loop(&shared, &trainer, fg_participant);
                    if shared.foreground_gap.is_some() && fg_participant {
                        trainer.syncer.leave();
                    }
                    out
                }));
            }
        }
        let shadows: Vec<_> = if shadow_placement {
            trainers
                .iter()
                .map(|trainer| {
                    let trainer = Arc::clone(trainer);
                    s.spawn(move || run_shadow_loop(&trainer, pacing))
                })
                .collect()
        } else {
            Vec::new()
        };

        for h in workers {
            match h.join().expect("worker panicked") {
                Ok(st) => worker_stats.push(st),
                Err(e) => run_err = Some(e),
            }
        }
        wall = t0.elapsed().as_secs_f64();
        // Workers done: raise stop flags; shadows run their final drain
        // round and exit.
        for trainer in &trainers {
            trainer.stop.store(true, Ordering::Relaxed);
        }
        for h in shadows {
            shadow_stats.push(h.join().expect("shadow panicked"));
        }
    });
    if let Some(e) = run_err {
        return Err(e);
    }
    embedding.stop();
    if let Some(g) = &sync_ps {
        g.stop();
    }

    let examples: u64 = worker_stats.iter().map(|s| s.examples).sum();
    let iterations: u64 = worker_stats.iter().map(|s| s.iterations).sum();
    let mut ne = NeAccumulator::default();
    for st in &worker_stats {
        ne.merge(&st.ne);
    }
    let sync_rounds: u64 = worker_stats.iter().map(|s| s.sync_rounds).sum::<u64>()
        + shadow_stats.iter().map(|s| s.rounds).sum::<u64>();
    let sync_aborted: u64 = worker_stats.iter().map(|s| s.sync_aborted).sum::<u64>()
        + shadow_stats.iter().map(|s| s.aborted).sum::<u64>();
    let sync_bytes = sync_ps
        .as_ref()
        .map(|g| g.bytes_received())
        .or_else(|| allreduce.as_ref().map(|g| g.bytes_contributed()))
        .unwrap_or(0);
    let stall_seconds: f64 = worker_stats.iter().map(|s| s.stall_seconds).sum();

    let metrics = RunMetrics {
        examples_processed: examples,
        iterations,
        wall_seconds: wall,
        eps: examples as f64 / wall,
        train_ne: ne.value(),
        sync_rounds,
        sync_aborted,
        sync_bytes,
        stall_seconds,
        param_bytes: (layout.len * std::mem::size_of::<T>()) as u64,
        batch_size: cluster.batch_size,
    };

    let replicas: Vec<Vec<T>> = trainers.iter().map(|t| t.params.snapshot()).collect();
    Ok(TrainOutput {
        dense: replicas[0].clone(),
        replicas,
        tables: embedding::assemble_tables(arch, &embedding.all_shards()),
        metrics,
    })
}
