//! Quick invariant and oracle suites behind `loft-lab check`.

use std::time::Instant;

use crate::convstack::{loss_and_grad, ConvStackSpec, ConvStackWeights, LossKind};
use crate::distsim::{analytic_local_sgd_bytes, analytic_loft_bytes, comm_cost_gpipe};
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::output::emit_outputs;
use crate::harness::pipeline::run_theory_suite;
use crate::loft::{gd_step, loft_step, mask_moments, sample_masks};
use crate::metrics::{filter_distance, footrule, weighted_footrule, RankMap, RankedFilterList};
use crate::partition::{aggregate, filter_partition};
use crate::rng::{self, domain};
use crate::tensor::Tensor;
use crate::theory::{grad_full, init_theory_model, loss, synthetic_dataset, MaskMode, TheoryConfig, TheoryModelState};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn theory_instance(m: usize, xi: f64, seed: u64) -> Result<TheoryModelState> {
    let cfg = TheoryConfig {
        m,
        n: 6,
        height: 4,
        width: 4,
        xi,
        workers: 1,
        seed,
        ..TheoryConfig::default()
    };
    let data = synthetic_dataset(&cfg, &mut rng::stream(seed, domain::DATA, 0, 0))?;
    init_theory_model(&cfg, &data)
}

fn loft_matches_gd() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let state = theory_instance(32, 1.0, seed)?;
        let masks = sample_masks(
            32,
            1,
            1.0,
            MaskMode::Bernoulli,
            &mut rng::stream(seed, domain::MASKS, 0, 0),
        )?;
        let (w, _) = loft_step(&state, &masks)?;
        worst = worst.max(w.max_abs_diff(&gd_step(&state, 1))?);
    }
    Ok((
        worst <= 1e-12,
        format!("max |W_loft - W_gd| = {worst:.3e} over 20 instances"),
    ))
}

fn theory_gradient_fd() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for seed in 0..5 {
        let state = theory_instance(8, 0.7, seed)?;
        if state.kink_margin() < 1e-5 {
            continue;
        }
        let g = grad_full(&state);
        let mut fd = vec![0.0; g.data().len()];
        for (k, f) in fd.iter_mut().enumerate() {
            let mut plus = state.w.clone();
            plus.data_mut()[k] += h;
            let mut minus = state.w.clone();
            minus.data_mut()[k] -= h;
            *f = (loss(&state.with_weights(plus)?) - loss(&state.with_weights(minus)?)) / (2.0 * h);
        }
        let err: f64 = g
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(err / g.frobenius().max(1e-12));
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.3e}")))
}

fn conv_gradient_fd() -> Result<(bool, String)> {
    let spec = ConvStackSpec::desk(2, 4, 4, 3, LossKind::CrossEntropy);
    let mut rng = rng::stream(0, domain::ORACLE, 1, 0);
    let w = ConvStackWeights::init(&spec, &mut rng);
    let xs: Vec<Tensor> = (0..2)
        .map(|k| {
            Tensor::from_vec(
                &[2, 4, 4],
                (0..32).map(|i| ((i * 7 + k * 3) as f64 * 0.37).sin()).collect(),
            )
        })
        .collect::<Result<_>>()?;
    let labels = vec![0, 2];
    let (_, g) = loss_and_grad(&w, &spec, &xs, &labels)?;
    let flat = w.flat();
    let gflat = g.flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in (0..flat.len()).step_by(37) {
        let mut p = flat.clone();
        p[k] += h;
        let mut q = flat.clone();
        q[k] -= h;
        let lp = loss_and_grad(&ConvStackWeights::from_flat(&spec, &p)?, &spec, &xs, &labels)?.0;
        let lq = loss_and_grad(&ConvStackWeights::from_flat(&spec, &q)?, &spec, &xs, &labels)?.0;
        let fd = (lp - lq) / (2.0 * h);
        let denom = gflat[k].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((gflat[k] - fd).abs() / denom);
    }
    Ok((worst < 1e-5, format!("max relative error {worst:.3e}")))
}

fn moments_exact() -> Result<(bool, String)> {
    let mut ok = true;
    let mut notes = Vec::new();
    for (xi, s) in [(0.5, 2), (0.25, 4)] {
        let table = mask_moments(xi, s, 100_000, &mut rng::stream(0, domain::MOMENTS, s as u64, 1))?;
        for row in &table.rows {
            ok &= row.within(row.exact, 3.0);
        }
        let r = table.row("nu_cross_sq");
        notes.push(format!(
            "xi={xi} S={s}: E[nu^2 | r!=r'] est {:.5} exact {:.5} (textbook form {:.5})",
            r.estimate, r.exact, r.stated
        ));
    }
    Ok((ok, notes.join("; ")))
}

fn partition_roundtrip() -> Result<(bool, String)> {
    let spec = ConvStackSpec::desk(3, 8, 8, 4, LossKind::CrossEntropy);
    let w = ConvStackWeights::init(&spec, &mut rng::stream(0, domain::INIT, 0, 0));
    let mut worst: f64 = 0.0;
    for s in [1, 2, 4] {
        let parts = filter_partition(&w, &spec, s, &mut rng::stream(0, domain::PARTITION, s as u64, 0))?;
        let back = aggregate(&w, &spec, &parts)?;
        worst = worst.max(back.max_abs_diff(&w)?);
    }
    Ok((worst <= 1e-12, format!("aggregate(partition(W)) deviation {worst:.3e}")))
}

fn list(idx: &[usize]) -> RankedFilterList {
    RankedFilterList {
        layer: "check".into(),
        epoch: 0,
        entries: idx
            .iter()
            .enumerate()
            .map(|(k, &i)| (i, (idx.len() - k) as f64))
            .collect(),
    }
}

fn metric_values() -> Result<(bool, String)> {
    let swap = filter_distance(&list(&[0, 1]), &list(&[1, 0]))?;
    let missing = filter_distance(&list(&[0, 1]), &list(&[0, 2]))?;
    let short = footrule(&RankMap::from_permutation(&[1, 0]))?;
    let perm = RankMap::from_permutation(&[2, 0, 1]);
    let unit = weighted_footrule(&perm, &[1.0; 3])? - footrule(&perm)?;
    let same = filter_distance(&list(&[3, 1, 2, 0]), &list(&[3, 1, 2, 0]))?;
    let expect_swap = 1.5 * 2f64.ln();
    let expect_missing = 0.5 * (3f64.ln() - 2f64.ln());
    let ok = (swap - expect_swap).abs() < 1e-9
        && (missing - expect_missing).abs() < 1e-9
        && (short - 2.0).abs() < 1e-12
        && unit.abs() < 1e-12
        && same == 0.0;
    Ok((ok, format!("swap {swap:.6}, missing {missing:.6}, footrule {short}")))
}

fn comm_ordering() -> Result<(bool, String)> {
    let spec = ConvStackSpec::desk(3, 8, 8, 4, LossKind::CrossEntropy);
    let mut ok = true;
    let mut notes = Vec::new();
    for s in [2, 4] {
        let loft = analytic_loft_bytes(&spec, s, 20);
        let local = analytic_local_sgd_bytes(&spec, s, 20);
        let gpipe = comm_cost_gpipe(&spec, 16, 20 * 25, s)?.total_bytes();
        ok &= loft < local && gpipe > loft;
        notes.push(format!("S={s}: loft {loft} local_sgd {local} gpipe {gpipe}"));
    }
    Ok((ok, notes.join("; ")))
}

fn determinism() -> Result<(bool, String)> {
    let cfg = ExperimentConfig::parse(
        "mode = \"theory\"\nseeds = [0, 1]\n[dataset]\nsource = \"synthetic_theory\"\nn = 6\nd_hat = 1\nheight = 4\nwidth = 4\n\
         [theory]\nm = [16]\nworkers = [2]\niterations = 10\nmoment_trials = 10000\n",
    )?;
    let a = tempfile_dir("a")?;
    let b = tempfile_dir("b")?;
    let ma = emit_outputs(&run_theory_suite(&cfg)?, &a)?;
    let mb = emit_outputs(&run_theory_suite(&cfg)?, &b)?;
    let _ = std::fs::remove_dir_all(&a);
    let _ = std::fs::remove_dir_all(&b);
    Ok((
        ma == mb,
        format!("{} files, identical hashes: {}", ma.files.len(), ma == mb),
    ))
}

fn tempfile_dir(tag: &str) -> Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("loft-lab-check-{}-{tag}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| crate::error::Error::io(&dir, e))?;
    Ok(dir)
}

type Suite = (&'static str, fn() -> Result<(bool, String)>);

const SUITES: [Suite; 8] = [
    ("loft_equals_gd", loft_matches_gd),
    ("theory_gradient_fd", theory_gradient_fd),
    ("convstack_gradient_fd", conv_gradient_fd),
    ("mask_moments_exact", moments_exact),
    ("partition_roundtrip", partition_roundtrip),
    ("metric_values", metric_values),
    ("comm_ordering", comm_ordering),
    ("determinism", determinism),
];

pub fn run_checks() -> Vec<CheckOutcome> {
    SUITES
        .iter()
        .map(|&(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
