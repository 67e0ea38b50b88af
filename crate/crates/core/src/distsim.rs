//! Simulated workers: LoFT rounds, local SGD, an analytic pipeline-parallel
//! cost model, and byte-exact communication ledgers.

use serde::{Deserialize, Serialize};

use crate::convstack::{ConvStackSpec, ConvStackWeights};
use crate::error::{Error, Result};
use crate::metrics::{rank_all, RankedFilterList};
use crate::partition::{aggregate, filter_partition, train_local, ImageSet};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

pub const BYTES_PER_PARAM: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Loft,
    LocalSgd,
    GpipeModel,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Loft => "loft",
            Protocol::LocalSgd => "local_sgd",
            Protocol::GpipeModel => "gpipe_model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerRecord {
    pub worker: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub peak_param_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundRecord {
    pub round: usize,
    pub workers: Vec<WorkerRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommLedger {
    pub protocol: Protocol,
    pub workers: usize,
    pub rounds: Vec<RoundRecord>,
}

impl CommLedger {
    pub fn new(protocol: Protocol, workers: usize) -> Self {
        CommLedger {
            protocol,
            workers,
            rounds: Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.protocol.name(), self.workers)
    }

    pub fn total_up(&self) -> u64 {
        self.records().map(|w| w.bytes_up).sum()
    }

    pub fn total_down(&self) -> u64 {
        self.records().map(|w| w.bytes_down).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_up() + self.total_down()
    }

    pub fn peak_param_bytes(&self) -> u64 {
        self.records().map(|w| w.peak_param_bytes).max().unwrap_or(0)
    }

    pub fn records(&self) -> impl Iterator<Item = &WorkerRecord> {
        self.rounds.iter().flat_map(|r| r.workers.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub workers: usize,
    pub rounds: usize,
    pub ell: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub seed: u64,
    /// Reuse the round-0 partition in every round.
    pub freeze_partition: bool,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.rounds == 0 || self.ell == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "workers, rounds, local iterations and batch size must be at least 1".into(),
            ));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub weights: ConvStackWeights,
    pub ledger: CommLedger,
    /// `snapshots[l][t]`: ranking of conv layer `l` after `t` rounds
    /// (`t = 0` is the initialization).
    pub snapshots: Vec<Vec<RankedFilterList>>,
    /// Mean worker loss on the last local step of each round.
    pub round_loss: Vec<f64>,
}

fn push_snapshot(snapshots: &mut Vec<Vec<RankedFilterList>>, weights: &ConvStackWeights, t: usize) {
    for (l, r) in rank_all(weights, t).into_iter().enumerate() {
        if snapshots.len() <= l {
            snapshots.push(Vec::new());
        }
        snapshots[l].push(r);
    }
}

fn wrap(round: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Round {
        round,
        source: Box::new(e),
    }
}

/// Every round partitions the global model, trains each subnetwork for `ell`
/// local steps on its own batch stream, then aggregates. Gradients are only
/// ever taken on subnetworks.
pub fn run_loft_pretrain(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    data: &ImageSet,
    sched: &ScheduleConfig,
) -> Result<PretrainResult> {
    sched.validate()?;
    spec.validate_workers(sched.workers)?;
    weights.check(spec)?;
    let mut w = weights.clone();
    let mut ledger = CommLedger::new(Protocol::Loft, sched.workers);
    let mut snapshots = Vec::new();
    let mut round_loss = Vec::with_capacity(sched.rounds);
    push_snapshot(&mut snapshots, &w, 0);
    for t in 0..sched.rounds {
        let err = wrap(t);
        let perm_round = if sched.freeze_partition { 0 } else { t as u64 };
        let mut prng = rng::stream(sched.seed, domain::PARTITION, perm_round, 0);
        let parts = filter_partition(&w, spec, sched.workers, &mut prng).map_err(&err)?;
        let mut trained = Vec::with_capacity(parts.len());
        let mut records = Vec::with_capacity(parts.len());
        let mut loss_sum = 0.0;
        for (sub_spec, sub) in parts {
            let down = sub.to_le_bytes().len() as u64;
            let mut brng = rng::stream(sched.seed, domain::BATCHES, t as u64, sub_spec.worker as u64);
            let (new, loss) = train_local(
                &sub,
                &sub_spec.stack,
                data,
                sched.batch_size,
                sched.ell,
                sched.eta,
                &mut brng,
                sub_spec.worker,
            )
            .map_err(&err)?;
            let up = new.to_le_bytes().len() as u64;
            records.push(WorkerRecord {
                worker: sub_spec.worker,
                bytes_up: up,
                bytes_down: down,
                peak_param_bytes: down.max(up),
            });
            loss_sum += loss;
            trained.push((sub_spec, new));
        }
        w = aggregate(&w, spec, &trained).map_err(&err)?;
        ledger.rounds.push(RoundRecord {
            round: t,
            workers: records,
        });
        round_loss.push(loss_sum / sched.workers as f64);
        push_snapshot(&mut snapshots, &w, t + 1);
    }
    Ok(PretrainResult {
        weights: w,
        ledger,
        snapshots,
        round_loss,
    })
}

/// Round-robin shard `s` of `S`.
pub fn shard(data: &ImageSet, s: usize, workers: usize) -> ImageSet {
    let idx: Vec<usize> = (s..data.len()).step_by(workers).collect();
    data.subset(&idx)
}

/// Mean of weight sets that equals the common value exactly when all agree.
pub fn average_weights(all: &[ConvStackWeights]) -> Result<ConvStackWeights> {
    let first = all
        .first()
        .ok_or_else(|| Error::Precondition("nothing to average".into()))?;
    let n = all.len() as f64;
    let mut delta = ConvStackWeights {
        layers: first.layers.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        head: Tensor::zeros(first.head.shape()),
    };
    for w in &all[1..] {
        let mut d = w.clone();
        d.axpy(-1.0, first)?;
        delta.axpy(1.0, &d)?;
    }
    let mut out = first.clone();
    out.axpy(1.0 / n, &delta)?;
    Ok(out)
}

/// Data-parallel local SGD: full replicas train `ell` steps on round-robin
/// shards, then are averaged. With one worker this is plain SGD.
pub fn run_local_sgd(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    data: &ImageSet,
    sched: &ScheduleConfig,
) -> Result<PretrainResult> {
    sched.validate()?;
    weights.check(spec)?;
    if data.len() < sched.workers {
        return Err(Error::Config(format!(
            "{} samples cannot be sharded over {} workers",
            data.len(),
            sched.workers
        )));
    }
    let shards: Vec<ImageSet> = (0..sched.workers).map(|s| shard(data, s, sched.workers)).collect();
    let mut w = weights.clone();
    let mut ledger = CommLedger::new(Protocol::LocalSgd, sched.workers);
    let mut snapshots = Vec::new();
    let mut round_loss = Vec::with_capacity(sched.rounds);
    push_snapshot(&mut snapshots, &w, 0);
    for t in 0..sched.rounds {
        let err = wrap(t);
        let mut replicas = Vec::with_capacity(sched.workers);
        let mut records = Vec::with_capacity(sched.workers);
        let mut loss_sum = 0.0;
        for (s, part) in shards.iter().enumerate() {
            let down = w.to_le_bytes().len() as u64;
            let mut brng = rng::stream(sched.seed, domain::BATCHES, t as u64, s as u64);
            let (new, loss) =
                train_local(&w, spec, part, sched.batch_size, sched.ell, sched.eta, &mut brng, s).map_err(&err)?;
            let up = new.to_le_bytes().len() as u64;
            records.push(WorkerRecord {
                worker: s,
                bytes_up: up,
                bytes_down: down,
                peak_param_bytes: down.max(up),
            });
            loss_sum += loss;
            replicas.push(new);
        }
        w = average_weights(&replicas).map_err(&err)?;
        ledger.rounds.push(RoundRecord {
            round: t,
            workers: records,
        });
        round_loss.push(loss_sum / sched.workers as f64);
        push_snapshot(&mut snapshots, &w, t + 1);
    }
    Ok(PretrainResult {
        weights: w,
        ledger,
        snapshots,
        round_loss,
    })
}

/// Layer ranges `[start, end)` of each pipeline stage over the conv layers.
pub fn stage_cuts(num_layers: usize, stages: usize) -> Result<Vec<(usize, usize)>> {
    if stages < 2 {
        return Err(Error::Config("a pipeline needs at least 2 stages".into()));
    }
    if num_layers < stages {
        return Err(Error::Config(format!(
            "{num_layers} layers cannot fill {stages} stages"
        )));
    }
    Ok((0..stages)
        .map(|k| (k * num_layers / stages, (k + 1) * num_layers / stages))
        .collect())
}

/// Per iteration, stage boundary `b` sends the activation at the cut forward
/// (`bytes_up` of worker `b`) and receives its gradient back (`bytes_down`).
pub fn comm_cost_gpipe(
    spec: &ConvStackSpec,
    batch_size: usize,
    iterations: usize,
    stages: usize,
) -> Result<CommLedger> {
    let cuts = stage_cuts(spec.num_layers(), stages)?;
    let stage_params: Vec<u64> = cuts
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            let conv: usize = (a..b).map(|l| spec.layer_shape(l).iter().product::<usize>()).sum();
            let head = if k + 1 == stages {
                spec.num_classes * spec.feature_channels()
            } else {
                0
            };
            (conv + head) as u64 * BYTES_PER_PARAM
        })
        .collect();
    let boundary_bytes: Vec<u64> = cuts[..stages - 1]
        .iter()
        .map(|&(_, end)| {
            let channels = spec.layer_shape(end - 1)[0];
            (batch_size * channels * spec.height * spec.width) as u64 * BYTES_PER_PARAM
        })
        .collect();
    let mut ledger = CommLedger::new(Protocol::GpipeModel, stages);
    for it in 0..iterations {
        ledger.rounds.push(RoundRecord {
            round: it,
            workers: boundary_bytes
                .iter()
                .enumerate()
                .map(|(b, &bytes)| WorkerRecord {
                    worker: b,
                    bytes_up: bytes,
                    bytes_down: bytes,
                    peak_param_bytes: stage_params[b],
                })
                .collect(),
        });
    }
    Ok(ledger)
}

/// LoFT bytes from parameter counts alone: each worker downloads and uploads
/// the shared parameters plus `1/S` of every partitioned block per round.
pub fn analytic_loft_bytes(spec: &ConvStackSpec, workers: usize, rounds: usize) -> u64 {
    let shared = spec.shared_param_count();
    let partitioned = spec.param_count() - shared;
    let per_worker = (shared + partitioned / workers) as u64 * BYTES_PER_PARAM;
    2 * per_worker * (workers * rounds) as u64
}

pub fn analytic_local_sgd_bytes(spec: &ConvStackSpec, workers: usize, rounds: usize) -> u64 {
    2 * spec.param_count() as u64 * BYTES_PER_PARAM * (workers * rounds) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerSummary {
    pub label: String,
    pub protocol: Protocol,
    pub workers: usize,
    pub total_bytes: u64,
    /// Total bytes relative to the reference ledger (LoFT when present).
    pub ratio: f64,
    pub peak_param_bytes: u64,
}

pub fn ledger_report(ledgers: &[CommLedger]) -> Result<Vec<LedgerSummary>> {
    let reference = ledgers
        .iter()
        .find(|l| l.protocol == Protocol::Loft)
        .or_else(|| ledgers.first())
        .ok_or_else(|| Error::Precondition("ledger report needs at least one ledger".into()))?;
    let base = reference.total_bytes() as f64;
    Ok(ledgers
        .iter()
        .map(|l| LedgerSummary {
            label: l.label(),
            protocol: l.protocol,
            workers: l.workers,
            total_bytes: l.total_bytes(),
            ratio: if base > 0.0 {
                l.total_bytes() as f64 / base
            } else if l.total_bytes() == 0 {
                1.0
            } else {
                f64::INFINITY
            },
            peak_param_bytes: l.peak_param_bytes(),
        })
        .collect())
}
