//! Experiment pipelines: pretrain, prune and finetune tickets on image data,
//! and the paired-trajectory sweeps of the theory model.

use log::{info, warn};
use serde::Serialize;

use crate::convstack::{accuracy, ConvStackSpec, ConvStackWeights};
use crate::distsim::{comm_cost_gpipe, ledger_report, run_local_sgd, run_loft_pretrain, CommLedger, PretrainResult};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, Mode, PipelineProtocol};
use crate::harness::dataset::{load_image_dataset, load_theory_dataset};
use crate::loft::{fit_linear_rate, mask_moments, plateau_level, run_paired_trajectories, DeviationReport};
use crate::metrics::{apply_ticket, distance_to_final, pairwise_heatmap, prune_filters, pruned_heatmap};
use crate::partition::{train_local, ImageSet};
use crate::rng::{self, domain};

pub const STATUS_OK: &str = "ok";

/// One long-format row of `results.csv`. Columns that do not apply to a
/// row's mode are left empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub mode: &'static str,
    pub cell: String,
    pub seed: u64,
    pub protocol: Option<String>,
    pub ratio: Option<f64>,
    pub m: Option<usize>,
    pub workers: Option<usize>,
    pub epoch: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapRow {
    pub layer: String,
    pub t1: usize,
    pub t2: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub metric: String,
    pub t: usize,
    pub value: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub protocol: String,
    pub round: usize,
    pub worker: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub peak_param_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCsvRow {
    pub xi: f64,
    pub workers: usize,
    pub trials: usize,
    pub theta: f64,
    pub quantity: &'static str,
    pub estimate: f64,
    pub std_err: f64,
    pub stated: f64,
    pub exact: f64,
}

/// A cell that aborted, with the error that stopped it.
#[derive(Debug, Clone, PartialEq)]
pub struct FailedCell {
    pub cell: String,
    pub error: String,
}

/// Everything an experiment produced, ready for [`emit_outputs`].
///
/// [`emit_outputs`]: crate::harness::output::emit_outputs
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultBundle {
    pub config_hash: Option<String>,
    pub results: Vec<ResultRow>,
    pub heatmap: Vec<HeatmapRow>,
    pub curves: Vec<CurveRow>,
    pub ledger: Vec<LedgerRow>,
    pub moments: Vec<MomentCsvRow>,
    pub failed: Vec<FailedCell>,
}

impl ResultBundle {
    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
            && self.heatmap.is_empty()
            && self.curves.is_empty()
            && self.ledger.is_empty()
            && self.moments.is_empty()
    }

    pub fn all_ok(&self) -> bool {
        self.failed.is_empty()
    }

    /// Values of `metric` restricted to rows matching `filter`.
    pub fn values(&self, metric: &str, filter: impl Fn(&ResultRow) -> bool) -> Vec<f64> {
        self.results
            .iter()
            .filter(|r| r.metric == metric && r.status == STATUS_OK && filter(r))
            .map(|r| r.value)
            .collect()
    }

    fn fail(&mut self, row: ResultRow, err: &Error) {
        warn!("cell {} failed: {err}", row.cell);
        self.failed.push(FailedCell {
            cell: row.cell.clone(),
            error: err.to_string(),
        });
        self.results.push(ResultRow {
            metric: "error".into(),
            value: f64::NAN,
            status: format!("error: {err}"),
            ..row
        });
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<ResultBundle> {
    match cfg.mode {
        Mode::System => run_ticket_pipeline(cfg),
        Mode::Theory => run_theory_suite(cfg),
    }
}

/// Plain SGD on a (pruned) model for `epochs` epochs of `n / batch_size`
/// steps. Epoch `e` draws its batches from `(seed, FINETUNE, e)`, so every
/// protocol's ticket sees the same batch sequence.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    weights: &ConvStackWeights,
    spec: &ConvStackSpec,
    train: &ImageSet,
    test: &ImageSet,
    epochs: usize,
    batch_size: usize,
    eta: f64,
    seed: u64,
) -> Result<(ConvStackWeights, Vec<(f64, f64)>)> {
    let steps = (train.len() / batch_size).max(1);
    let mut w = weights.clone();
    let mut history = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let mut r = rng::stream(seed, domain::FINETUNE, e as u64, 0);
        let (next, loss) = train_local(&w, spec, train, batch_size, steps, eta, &mut r, 0)?;
        w = next;
        history.push((loss, accuracy(&w, spec, &test.x, &test.labels)?));
    }
    Ok((w, history))
}

fn pretrain(
    protocol: PipelineProtocol,
    cfg: &ExperimentConfig,
    spec: &ConvStackSpec,
    w0: &ConvStackWeights,
    train: &ImageSet,
    seed: u64,
) -> Result<PretrainResult> {
    match protocol {
        PipelineProtocol::Loft => run_loft_pretrain(w0, spec, train, &cfg.schedule(cfg.schedule.workers, seed)),
        PipelineProtocol::LocalSgd => run_local_sgd(w0, spec, train, &cfg.schedule(cfg.schedule.workers, seed)),
        PipelineProtocol::Dense => run_local_sgd(w0, spec, train, &cfg.schedule(1, seed)),
    }
}

fn ledger_rows(ledger: &CommLedger) -> impl Iterator<Item = LedgerRow> + '_ {
    let label = ledger.label();
    ledger.rounds.iter().flat_map(move |round| {
        let label = label.clone();
        round.workers.iter().map(move |w| LedgerRow {
            protocol: label.clone(),
            round: round.round,
            worker: w.worker,
            bytes_up: w.bytes_up,
            bytes_down: w.bytes_down,
            peak_param_bytes: w.peak_param_bytes,
        })
    })
}

/// Pretrain, prune and finetune for every seed, protocol and ratio.
///
/// Heatmaps come from the first seed's LoFT run (or the first protocol when
/// LoFT is not configured). Byte counts do not depend on the seed, so ledger
/// rows are kept for the first seed only.
pub fn run_ticket_pipeline(cfg: &ExperimentConfig) -> Result<ResultBundle> {
    if cfg.mode != Mode::System {
        return Err(Error::Config("run_ticket_pipeline needs mode = \"system\"".into()));
    }
    cfg.validate()?;
    let spec = cfg.stack_spec()?;
    let p = &cfg.pipeline;
    let heatmap_protocol = if p.protocols.contains(&PipelineProtocol::Loft) {
        PipelineProtocol::Loft
    } else {
        p.protocols[0]
    };
    let mut bundle = ResultBundle {
        config_hash: Some(cfg.hash()),
        ..Default::default()
    };
    let mut first_ledgers = Vec::new();

    for (seed_idx, &seed) in cfg.seeds.iter().enumerate() {
        let base = |cell: String, protocol: Option<PipelineProtocol>, ratio: Option<f64>| ResultRow {
            mode: "system",
            cell,
            seed,
            protocol: protocol.map(|p| p.name().to_string()),
            ratio,
            m: None,
            workers: protocol.map(|p| {
                if p == PipelineProtocol::Dense {
                    1
                } else {
                    cfg.schedule.workers
                }
            }),
            epoch: None,
            metric: String::new(),
            value: 0.0,
            status: STATUS_OK.into(),
        };
        let (train, test) = match load_image_dataset(&cfg.dataset, seed) {
            Ok(d) => d,
            Err(e) => {
                for &protocol in &p.protocols {
                    bundle.fail(
                        base(format!("seed{seed}/{}", protocol.name()), Some(protocol), None),
                        &e,
                    );
                }
                continue;
            }
        };
        let w0 = ConvStackWeights::init(&spec, &mut rng::stream(seed, domain::INIT, 0, 0));

        for &protocol in &p.protocols {
            let cell = format!("seed{seed}/{}", protocol.name());
            info!("pretraining {cell}");
            let res = match pretrain(protocol, cfg, &spec, &w0, &train, seed) {
                Ok(r) => r,
                Err(e) => {
                    bundle.fail(base(cell.clone(), Some(protocol), None), &e);
                    for &ratio in &p.ratios {
                        let sub = format!("{cell}/r{ratio}");
                        bundle.fail(base(sub, Some(protocol), Some(ratio)), &e);
                    }
                    continue;
                }
            };
            let row = |metric: &str, epoch: Option<usize>, value: f64| ResultRow {
                metric: metric.into(),
                epoch,
                value,
                ..base(cell.clone(), Some(protocol), None)
            };
            for (t, &loss) in res.round_loss.iter().enumerate() {
                bundle.results.push(row("pretrain_loss", Some(t + 1), loss));
            }
            match accuracy(&res.weights, &spec, &test.x, &test.labels) {
                Ok(acc) => bundle.results.push(row("pretrain_accuracy", None, acc)),
                Err(e) => bundle.fail(base(cell.clone(), Some(protocol), None), &e),
            }
            bundle
                .results
                .push(row("total_bytes", None, res.ledger.total_bytes() as f64));

            match distance_to_final(&res.snapshots) {
                Ok(curve) => bundle
                    .curves
                    .extend(curve.iter().enumerate().map(|(t, &value)| CurveRow {
                        metric: format!("distance_to_final/{}", protocol.name()),
                        t,
                        value,
                        seed,
                    })),
                Err(e) => bundle.fail(base(cell.clone(), Some(protocol), None), &e),
            }
            bundle
                .curves
                .extend(res.round_loss.iter().enumerate().map(|(t, &value)| CurveRow {
                    metric: format!("pretrain_loss/{}", protocol.name()),
                    t: t + 1,
                    value,
                    seed,
                }));
            if seed_idx == 0 && protocol == heatmap_protocol {
                if let Err(e) = push_heatmaps(&mut bundle, cfg, &res) {
                    bundle.fail(base(cell.clone(), Some(protocol), None), &e);
                }
            }
            if seed_idx == 0 {
                bundle.ledger.extend(ledger_rows(&res.ledger));
                first_ledgers.push(res.ledger.clone());
            }

            for &ratio in &p.ratios {
                let sub = format!("{cell}/r{ratio}");
                let out = ticket_cell(cfg, &spec, &res.weights, &train, &test, ratio, seed);
                let rrow = |metric: &str, epoch: Option<usize>, value: f64| ResultRow {
                    metric: metric.into(),
                    epoch,
                    value,
                    ..base(sub.clone(), Some(protocol), Some(ratio))
                };
                match out {
                    Ok(ticket) => {
                        bundle.results.push(rrow("ticket_params", None, ticket.params as f64));
                        for (e, &(loss, acc)) in ticket.history.iter().enumerate() {
                            bundle.results.push(rrow("finetune_loss", Some(e + 1), loss));
                            bundle.results.push(rrow("finetune_accuracy", Some(e + 1), acc));
                        }
                        bundle.results.push(rrow("ticket_accuracy", None, ticket.accuracy));
                    }
                    Err(e) => bundle.fail(base(sub, Some(protocol), Some(ratio)), &e),
                }
            }
        }
    }

    if p.gpipe && cfg.schedule.workers >= 2 {
        let seed = cfg.seeds[0];
        let iterations = p.pretrain_epochs * cfg.schedule.ell;
        match comm_cost_gpipe(&spec, cfg.schedule.batch_size, iterations, cfg.schedule.workers) {
            Ok(ledger) => {
                bundle.ledger.extend(ledger_rows(&ledger));
                first_ledgers.push(ledger);
            }
            Err(e) => {
                let row = ResultRow {
                    mode: "system",
                    cell: "gpipe".into(),
                    seed,
                    protocol: Some("gpipe".into()),
                    ratio: None,
                    m: None,
                    workers: Some(cfg.schedule.workers),
                    epoch: None,
                    metric: String::new(),
                    value: 0.0,
                    status: STATUS_OK.into(),
                };
                bundle.fail(row, &e);
            }
        }
    }
    if !first_ledgers.is_empty() {
        for s in ledger_report(&first_ledgers)? {
            bundle.results.push(ResultRow {
                mode: "system",
                cell: format!("ledger/{}", s.label),
                seed: cfg.seeds[0],
                protocol: Some(s.label.clone()),
                ratio: None,
                m: None,
                workers: Some(s.workers),
                epoch: None,
                metric: "bytes_ratio".into(),
                value: s.ratio,
                status: STATUS_OK.into(),
            });
        }
    }
    Ok(bundle)
}

struct TicketOutcome {
    params: usize,
    history: Vec<(f64, f64)>,
    accuracy: f64,
}

fn ticket_cell(
    cfg: &ExperimentConfig,
    spec: &ConvStackSpec,
    weights: &ConvStackWeights,
    train: &ImageSet,
    test: &ImageSet,
    ratio: f64,
    seed: u64,
) -> Result<TicketOutcome> {
    let mask = prune_filters(weights, spec, ratio)?;
    let (tspec, tw) = apply_ticket(weights, spec, &mask)?;
    let p = &cfg.pipeline;
    let (w, history) = finetune(
        &tw,
        &tspec,
        train,
        test,
        p.finetune_epochs,
        cfg.schedule.batch_size,
        p.finetune_eta,
        seed,
    )?;
    let accuracy = match history.last() {
        Some(&(_, acc)) => acc,
        None => crate::convstack::accuracy(&w, &tspec, &test.x, &test.labels)?,
    };
    Ok(TicketOutcome {
        params: tw.param_count(),
        history,
        accuracy,
    })
}

fn push_heatmaps(bundle: &mut ResultBundle, cfg: &ExperimentConfig, res: &PretrainResult) -> Result<()> {
    let ratio = cfg.pipeline.ratios.first().copied().unwrap_or(0.0);
    for snaps in &res.snapshots {
        let grid = if cfg.pipeline.heatmap_pruned {
            pruned_heatmap(snaps, ratio)?
        } else {
            pairwise_heatmap(snaps)?
        };
        let e = snaps.len();
        let layer = &snaps[0].layer;
        for t1 in 0..e {
            for t2 in 0..e {
                bundle.heatmap.push(HeatmapRow {
                    layer: layer.clone(),
                    t1,
                    t2,
                    distance: grid.data()[t1 * e + t2],
                });
            }
        }
    }
    Ok(())
}

fn theory_summary(report: &DeviationReport) -> Vec<(&'static str, f64)> {
    let fit = fit_linear_rate(&report.loss_curve, report.theta, report.eta, report.lambda0);
    vec![
        ("weight_dev_final", report.weight_dev),
        ("output_dev_sum", report.output_dev_sum),
        ("weight_drift", report.weight_drift),
        ("eta", report.eta),
        ("lambda0", report.lambda0),
        ("theta", report.theta),
        ("loss_initial", report.loss_curve[0]),
        ("loss_final", *report.loss_curve.last().expect("nonempty curve")),
        ("plateau", plateau_level(&report.loss_curve)),
        ("rate_slope", fit.slope),
        ("rate_predicted", fit.predicted),
        ("rate_geometric", if fit.geometric { 1.0 } else { 0.0 }),
    ]
}

/// Paired LoFT/GD trajectories over the `m x S` grid for every seed, plus
/// the mask-moment table for each `S`.
pub fn run_theory_suite(cfg: &ExperimentConfig) -> Result<ResultBundle> {
    if cfg.mode != Mode::Theory {
        return Err(Error::Config("run_theory_suite needs mode = \"theory\"".into()));
    }
    cfg.validate()?;
    let t = &cfg.theory;
    let mut bundle = ResultBundle {
        config_hash: Some(cfg.hash()),
        ..Default::default()
    };
    for &seed in &cfg.seeds {
        let data = load_theory_dataset(&cfg.dataset, t.q, &mut rng::stream(seed, domain::DATA, 0, 0));
        for &m in &t.m {
            for &s in &t.workers {
                let cell = format!("seed{seed}/m{m}/S{s}");
                let base = ResultRow {
                    mode: "theory",
                    cell: cell.clone(),
                    seed,
                    protocol: Some("loft".into()),
                    ratio: None,
                    m: Some(m),
                    workers: Some(s),
                    epoch: None,
                    metric: String::new(),
                    value: 0.0,
                    status: STATUS_OK.into(),
                };
                let report = match &data {
                    Ok(d) => {
                        info!("theory cell {cell}");
                        run_paired_trajectories(&cfg.theory_config(m, s, seed), d)
                    }
                    Err(e) => Err(Error::Config(e.to_string())),
                };
                let report = match report {
                    Ok(r) => r,
                    Err(e) => {
                        let e = Error::Config(format!("dataset seed {seed}: {e}"));
                        bundle.fail(base, &e);
                        continue;
                    }
                };
                for rec in &report.records {
                    for (metric, value) in [
                        ("loss", rec.loss),
                        ("baseline_loss", rec.baseline_loss),
                        ("weight_dev", rec.weight_dev),
                        ("output_dev", rec.output_dev),
                        ("drift", rec.drift),
                    ] {
                        bundle.results.push(ResultRow {
                            epoch: Some(rec.t),
                            metric: metric.into(),
                            value,
                            ..base.clone()
                        });
                    }
                }
                for (metric, value) in theory_summary(&report) {
                    bundle.results.push(ResultRow {
                        metric: metric.into(),
                        value,
                        ..base.clone()
                    });
                }
                bundle
                    .curves
                    .extend(report.loss_curve.iter().enumerate().map(|(i, &value)| CurveRow {
                        metric: format!("loss/m{m}/S{s}"),
                        t: i,
                        value,
                        seed,
                    }));
            }
        }
    }
    for &s in &t.workers {
        let mut r = rng::stream(cfg.seeds[0], domain::MOMENTS, s as u64, 0);
        match mask_moments(t.xi, s, t.moment_trials, &mut r) {
            Ok(table) => bundle.moments.extend(table.rows.iter().map(|row| MomentCsvRow {
                xi: table.xi,
                workers: table.workers,
                trials: table.trials,
                theta: table.theta,
                quantity: row.quantity,
                estimate: row.estimate,
                std_err: row.std_err,
                stated: row.stated,
                exact: row.exact,
            })),
            Err(e) => bundle.fail(
                ResultRow {
                    mode: "theory",
                    cell: format!("moments/S{s}"),
                    seed: cfg.seeds[0],
                    protocol: None,
                    ratio: None,
                    m: None,
                    workers: Some(s),
                    epoch: None,
                    metric: String::new(),
                    value: 0.0,
                    status: STATUS_OK.into(),
                },
                &e,
            ),
        }
    }
    Ok(bundle)
}
