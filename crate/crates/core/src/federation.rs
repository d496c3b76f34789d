//! The continual-federated round/task engine.
//!
//! For every task the server runs `rounds_per_task` rounds of: sample
//! clients, broadcast the global model, train locally under the configured
//! algorithm, and average the returned models weighted by shard size. When a
//! task ends the global model is evaluated on every test set seen so far and
//! each client runs its algorithm's task-boundary step on the outgoing shard,
//! after which that shard is retired for good.
//!
//! All randomness is derived from `(seed, purpose, ...)` coordinates, so a
//! run is bit-identical whether clients train serially or on a thread pool.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Algo, ExperimentConfig, RunConfig};
use crate::datagen::{dirichlet_partition_with_retries, Partition, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::{
    average_accuracy, eval_global, final_accuracy, forgetting, pooled_accuracy, AccuracyMatrix,
    MetricsRecord, RunningAverage,
};
use crate::nn::{init_model, Batch, MlpModel, Optimizer};
use crate::params::ParamVector;
use crate::psm::{default_psm_iters, psm_contribution_handoff, train_psm, PsmConfig};
use crate::regularizers::{ewc_estimate_fisher, prox_penalty, EwcState, SiState};
use crate::seed::derive_seed;

// derive_seed purposes
const INIT: u64 = 10;
const SELECT: u64 = 11;
const LOCAL: u64 = 12;
const PSM: u64 = 13;
const FISHER: u64 = 14;
const PARTITION: u64 = 15;

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global_model: MlpModel,
    pub round_index: usize,
    pub task_index: usize,
    seed: u64,
}

impl ServerState {
    pub fn new(global_model: MlpModel, seed: u64) -> Self {
        Self {
            global_model,
            round_index: 0,
            task_index: 0,
            seed,
        }
    }
}

/// Uniform sample without replacement of `ceil(ratio * n_clients)` ids,
/// returned sorted. Depends only on the run seed and the round index.
pub fn select_clients(server: &ServerState, n_clients: usize, ratio: f64) -> Vec<usize> {
    let m = ((ratio * n_clients as f64 - 1e-9).ceil() as usize).clamp(1, n_clients.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        server.seed,
        &[SELECT, server.round_index as u64],
    ));
    let mut ids = rand::seq::index::sample(&mut rng, n_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

/// Weighted elementwise mean `sum w_i m_i / sum w_i`, reduced in the given
/// order, with a single division at the end. The result is clamped to the
/// per-coordinate range of the inputs so identical inputs come back bitwise
/// and rounding can never leave the convex hull.
pub fn aggregate(models: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if models.is_empty() {
        return Err(Error::Aggregation("no models to aggregate".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Aggregation(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(Error::Aggregation(format!("invalid weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Aggregation("all weights are zero".into()));
    }
    let base = models[0];
    for m in &models[1..] {
        base.check_layout(m)
            .map_err(|_| Error::Aggregation("model layouts differ".into()))?;
    }
    let mut out = base.clone();
    let n = out.len();
    for i in 0..n {
        let b = base.as_slice()[i];
        let (mut lo, mut hi, mut acc) = (b, b, 0.0);
        for (m, &w) in models.iter().zip(weights) {
            let x = m.as_slice()[i];
            lo = lo.min(x);
            hi = hi.max(x);
            acc += w * x;
        }
        out.as_mut_slice()[i] = (acc / total).clamp(lo, hi);
    }
    Ok(out)
}

/// [`aggregate`] with the reduction order fixed by client id.
pub fn aggregate_by_client(entries: &[(usize, &ParamVector, f64)]) -> Result<ParamVector> {
    let mut sorted: Vec<&(usize, &ParamVector, f64)> = entries.iter().collect();
    sorted.sort_by_key(|e| e.0);
    let models: Vec<&ParamVector> = sorted.iter().map(|e| e.1).collect();
    let weights: Vec<f64> = sorted.iter().map(|e| e.2).collect();
    aggregate(&models, &weights)
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub si: Option<SiState>,
    pub ewc: Option<EwcState>,
    pub local_model: MlpModel,
    /// Last locally trained parameters in the current task.
    last_local: Option<ParamVector>,
}

impl ClientState {
    pub fn new(client_id: usize, global: &MlpModel, cfg: &RunConfig) -> Result<Self> {
        let si = if cfg.algo.uses_si() {
            Some(SiState::new(global.params(), cfg.eps, cfg.reg())?)
        } else {
            None
        };
        let ewc = (cfg.algo == Algo::FlEwc).then(|| EwcState::empty(global.params(), cfg.reg()));
        Ok(Self {
            client_id,
            si,
            ewc,
            local_model: global.clone(),
            last_local: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadPurpose {
    LocalTraining,
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardRead {
    pub client: usize,
    pub shard_task: usize,
    pub during_task: usize,
    pub purpose: ReadPurpose,
}

/// Log of every training-shard access made by the engine.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ShardAudit {
    pub reads: Vec<ShardRead>,
}

impl ShardAudit {
    /// Reads of a shard belonging to a task that had already ended.
    pub fn rehearsal_reads(&self) -> Vec<ShardRead> {
        self.reads
            .iter()
            .filter(|r| r.shard_task < r.during_task)
            .copied()
            .collect()
    }
}

/// Per-client training shards with a release/retire lifecycle: a task's
/// shards become readable when the task opens and are dropped once its
/// boundary has run.
pub struct ShardStore {
    shards: Vec<Vec<Option<Batch>>>,
    current: Option<usize>,
}

impl ShardStore {
    pub fn new(stream: &TaskStream, partitions: &[Partition], n_clients: usize) -> Result<Self> {
        if partitions.len() != stream.n_tasks() {
            return Err(Error::Protocol(format!(
                "{} partitions for {} tasks",
                partitions.len(),
                stream.n_tasks()
            )));
        }
        let mut shards = Vec::with_capacity(stream.n_tasks());
        for (task, part) in stream.tasks.iter().zip(partitions) {
            if part.n_clients() != n_clients {
                return Err(Error::Protocol(format!(
                    "task {} partition has {} clients, expected {n_clients}",
                    task.task_id,
                    part.n_clients()
                )));
            }
            part.validate(task.train.len())?;
            shards.push(
                part.assignments
                    .iter()
                    .map(|idx| Some(task.train.subset(idx)))
                    .collect(),
            );
        }
        Ok(Self {
            shards,
            current: None,
        })
    }

    pub fn open(&mut self, task: usize) {
        self.current = Some(task);
    }

    pub fn retire(&mut self, task: usize) {
        for s in &mut self.shards[task] {
            *s = None;
        }
    }

    pub fn len(&self, client: usize, task: usize) -> Option<usize> {
        self.shards.get(task)?.get(client)?.as_ref().map(Batch::len)
    }

    pub fn read<'a>(
        &'a self,
        audit: &mut ShardAudit,
        client: usize,
        task: usize,
        purpose: ReadPurpose,
    ) -> Result<&'a Batch> {
        let current = self
            .current
            .ok_or_else(|| Error::Protocol("no task is open".into()))?;
        if task > current {
            return Err(Error::Protocol(format!(
                "client {client}: task {task} has not been released yet (current task {current})"
            )));
        }
        let shard = self
            .shards
            .get(task)
            .and_then(|t| t.get(client))
            .ok_or_else(|| Error::Protocol(format!("client {client} has no shard for task {task}")))?
            .as_ref()
            .ok_or_else(|| {
                Error::Protocol(format!("client {client}: task {task} shard was already retired"))
            })?;
        audit.reads.push(ShardRead {
            client,
            shard_task: task,
            during_task: current,
            purpose,
        });
        Ok(shard)
    }
}

/// Resets the client's model to the global one and runs `local_epochs`
/// epochs of minibatch descent on the data loss plus the algorithm's
/// penalty. Returns the trained parameters.
pub fn local_train(
    client: &mut ClientState,
    shard: &Batch,
    global: &MlpModel,
    cfg: &RunConfig,
    lr: f64,
    seed: u64,
) -> Result<ParamVector> {
    if shard.is_empty() {
        return Err(Error::Protocol(format!(
            "client {} has an empty shard",
            client.client_id
        )));
    }
    let global_w = global.params();

    if cfg.algo == Algo::FlSi && cfg.si_count_aggregation_jumps {
        if let (Some(prev), Some(si)) = (client.last_local.as_ref(), client.si.as_mut()) {
            let g = global.with_params(prev.clone())?.backward(shard)?;
            si.accumulate(&g, &global_w.sub(prev)?)?;
        }
    }

    let mut model = global.clone();
    let mut opt = Optimizer::new(cfg.optimizer, global_w.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mb = shard.subset(chunk);
            let (_, data_grad) = model.loss_and_grad(&mb)?;
            let w = model.params();
            let penalty_grad = match cfg.algo {
                Algo::FedAvg => None,
                Algo::FedProx => Some(prox_penalty(w, global_w, cfg.mu())?.1),
                Algo::FlEwc => Some(client.ewc.as_ref().expect("ewc state").penalty(w)?.1),
                Algo::FlSi | Algo::FedSsi => {
                    Some(client.si.as_ref().expect("si state").penalty(w)?.1)
                }
            };
            let total = match penalty_grad {
                None => data_grad.clone(),
                Some(p) => data_grad.add(&p)?,
            };
            let (next, delta) = opt.step(w, &total, lr)?;
            if cfg.algo == Algo::FlSi {
                client
                    .si
                    .as_mut()
                    .expect("si state")
                    .accumulate(&data_grad, &delta)?;
            }
            model.set_params(next)?;
        }
    }
    let trained = model.params().clone();
    client.last_local = Some(trained.clone());
    client.local_model = model;
    Ok(trained)
}

/// Surrogate settings for one client at a boundary.
pub fn psm_config_for(cfg: &RunConfig, shard_len: usize) -> Result<PsmConfig> {
    let lambda = cfg
        .lambda
        .ok_or_else(|| Error::config("lambda", "required when algo = fedssi"))?;
    let batch_size = cfg.psm.batch_size.unwrap_or(cfg.batch_size);
    let iters = cfg.psm.iters.unwrap_or_else(|| {
        default_psm_iters(
            cfg.rounds_per_task,
            cfg.local_epochs,
            shard_len.div_ceil(cfg.batch_size),
        )
    });
    Ok(PsmConfig {
        lambda,
        eta: cfg.psm.eta.unwrap_or(cfg.lr),
        iters,
        batch_size,
    })
}

/// Per-algorithm work done when a task ends, using the outgoing task's shard
/// and the global model `w^{t-1}` the task finished with.
pub fn task_boundary(
    client: &mut ClientState,
    outgoing: &Batch,
    global: &MlpModel,
    cfg: &RunConfig,
    seed: u64,
) -> Result<()> {
    client.last_local = None;
    match cfg.algo {
        Algo::FedAvg | Algo::FedProx => {}
        Algo::FlSi => {
            client
                .si
                .as_mut()
                .expect("si state")
                .consolidate(global.params())?;
        }
        Algo::FedSsi => {
            let psm_cfg = psm_config_for(cfg, outgoing.len())?;
            let psm = train_psm(global.params(), global, outgoing, &psm_cfg, seed)?;
            psm_contribution_handoff(&psm, client.si.as_mut().expect("si state"))?;
        }
        Algo::FlEwc => {
            let est = ewc_estimate_fisher(global, outgoing, cfg.ewc_samples, seed, cfg.reg())?;
            client.ewc.as_mut().expect("ewc state").absorb(&est)?;
        }
    }
    Ok(())
}

/// One Dirichlet partition per task, seeded from the run seed.
pub fn build_partitions(cfg: &RunConfig, stream: &TaskStream) -> Result<Vec<Partition>> {
    stream
        .tasks
        .iter()
        .map(|task| {
            dirichlet_partition_with_retries(
                task,
                cfg.n_clients,
                cfg.alpha_dir,
                derive_seed(cfg.seed, &[PARTITION, task.task_id as u64]),
                cfg.partition_retries,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecOptions {
    /// Worker threads for per-client work; 1 runs everything inline.
    pub threads: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

pub struct RunOutcome {
    pub record: MetricsRecord,
    pub audit: ShardAudit,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

fn run_jobs<T, R, F>(pool: Option<&rayon::ThreadPool>, jobs: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    match pool {
        None => jobs.into_iter().map(f).collect(),
        Some(pool) => pool.install(|| jobs.into_par_iter().map(f).collect()),
    }
}

pub fn run_experiment(
    cfg: &RunConfig,
    stream: &TaskStream,
    partitions: &[Partition],
) -> Result<MetricsRecord> {
    Ok(run_experiment_with(cfg, stream, partitions, ExecOptions::default())?.record)
}

pub fn run_experiment_with(
    cfg: &RunConfig,
    stream: &TaskStream,
    partitions: &[Partition],
    exec: ExecOptions,
) -> Result<RunOutcome> {
    cfg.validate()?;
    stream.validate()?;
    let started = Instant::now();
    let k = cfg.n_clients;
    let n_tasks = stream.n_tasks();
    let t_rounds = cfg.rounds_per_task;
    let total_rounds = n_tasks * t_rounds;

    let dims: Vec<usize> = std::iter::once(stream.feature_dim)
        .chain(cfg.hidden.iter().copied())
        .chain(std::iter::once(stream.n_classes))
        .collect();
    let init = init_model(&dims, derive_seed(cfg.seed, &[INIT]))?;
    let mut server = ServerState::new(init, cfg.seed);
    let mut clients = (0..k)
        .map(|id| ClientState::new(id, &server.global_model, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut store = ShardStore::new(stream, partitions, k)?;
    let mut audit = ShardAudit::default();

    let pool = if exec.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(exec.threads)
                .build()
                .map_err(|e| Error::Protocol(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut matrix = AccuracyMatrix::new();
    let mut running = RunningAverage::default();
    let mut rounds_to_best = cfg.per_round_eval.then(Vec::new);

    for t in 0..n_tasks {
        server.task_index = t;
        store.open(t);
        let tests: Vec<&Batch> = stream.tasks[..=t].iter().map(|task| &task.test).collect();
        let mut touched = vec![false; k];
        let mut best: Option<(f64, usize)> = None;

        for c in 0..t_rounds {
            let r = t * t_rounds + c;
            server.round_index = r;
            let selected = select_clients(&server, k, cfg.select_ratio);
            let lr = cfg.lr_schedule.lr_at(cfg.lr, r, total_rounds);

            let mut shard_of: Vec<Option<&Batch>> = vec![None; k];
            for &id in &selected {
                shard_of[id] = Some(
                    store
                        .read(&mut audit, id, t, ReadPurpose::LocalTraining)
                        .map_err(|e| e.at(t, c))?,
                );
                touched[id] = true;
            }
            let jobs: Vec<(&mut ClientState, &Batch)> = clients
                .iter_mut()
                .zip(&shard_of)
                .filter_map(|(cl, s)| s.map(|s| (cl, s)))
                .collect();
            let global = &server.global_model;
            let trained = run_jobs(pool.as_ref(), jobs, |(client, shard)| {
                let seed = derive_seed(cfg.seed, &[LOCAL, client.client_id as u64, r as u64]);
                let w = local_train(client, shard, global, cfg, lr, seed)?;
                Ok((client.client_id, w, shard.len() as f64))
            })
            .map_err(|e| e.at(t, c))?;

            let entries: Vec<(usize, &ParamVector, f64)> =
                trained.iter().map(|(id, w, n)| (*id, w, *n)).collect();
            let next = aggregate_by_client(&entries).map_err(|e| e.at(t, c))?;
            server.global_model.set_params(next).map_err(|e| e.at(t, c))?;

            if cfg.per_round_eval {
                let acc = pooled_accuracy(&server.global_model, &tests).map_err(|e| e.at(t, c))?;
                if best.is_none_or(|(b, _)| acc > b) {
                    best = Some((acc, c + 1));
                }
            }
        }

        let row = eval_global(&server.global_model, &tests).map_err(|e| e.at(t, t_rounds))?;
        running.push(&row);
        matrix.push_row(row)?;
        if let (Some(v), Some((_, rounds))) = (rounds_to_best.as_mut(), best) {
            v.push(rounds);
        }

        let mut boundary_jobs = Vec::new();
        for (client, &was_selected) in clients.iter_mut().zip(&touched) {
            if cfg.boundary_selected_only && !was_selected {
                continue;
            }
            let shard = store
                .read(&mut audit, client.client_id, t, ReadPurpose::Boundary)
                .map_err(|e| e.at(t, t_rounds))?;
            boundary_jobs.push((client, shard));
        }
        let global = &server.global_model;
        run_jobs(pool.as_ref(), boundary_jobs, |(client, shard)| {
            let purpose = if cfg.algo == Algo::FlEwc { FISHER } else { PSM };
            let seed = derive_seed(cfg.seed, &[purpose, client.client_id as u64, t as u64]);
            task_boundary(client, shard, global, cfg, seed)
        })
        .map_err(|e| e.at(t, t_rounds))?;
        store.retire(t);
    }

    let final_acc = final_accuracy(&matrix)?;
    let avg_acc = running.value();
    debug_assert_eq!(avg_acc, average_accuracy(&matrix)?);
    let forgetting = if n_tasks >= 2 { forgetting(&matrix)? } else { 0.0 };
    let digest = {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(cfg)?))
    };
    let record = MetricsRecord {
        algo: cfg.algo,
        alpha_dir: cfg.alpha_dir,
        lambda: if cfg.algo == Algo::FedSsi { cfg.lambda } else { None },
        seed: cfg.seed,
        matrix,
        final_acc,
        avg_acc,
        forgetting,
        rounds_to_best,
        config_digest: digest,
        wall_ms: started.elapsed().as_millis() as u64,
    };
    Ok(RunOutcome {
        record,
        audit,
        server,
        clients,
    })
}

/// Builds the stream and partitions described by `exp` and runs it.
pub fn run_config(exp: &ExperimentConfig, exec: ExecOptions) -> Result<RunOutcome> {
    exp.validate()?;
    let stream = exp.build_stream()?;
    let partitions = build_partitions(&exp.run, &stream)?;
    let mut out = run_experiment_with(&exp.run, &stream, &partitions, exec)?;
    out.record.config_digest = exp.digest();
    Ok(out)
}
