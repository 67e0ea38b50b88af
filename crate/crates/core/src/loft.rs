//! Masked LoFT updates on the theory model, the scaled GD baseline and the
//! deviation measurements between the two trajectories.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, domain, Rng};
use crate::tensor::Tensor;
use crate::theory::{
    full_gradient, init_theory_model, residual_sq, theta, Activations, MaskMode, TheoryConfig, TheoryDataset,
    TheoryModelState,
};

/// `m x S` membership matrix: entry `(r, s)` says whether filter `r` is in
/// subnetwork `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    bits: Vec<bool>,
    m: usize,
    workers: usize,
    pub mode: MaskMode,
    pub xi: f64,
}

impl MaskMatrix {
    pub fn from_bits(m: usize, workers: usize, bits: Vec<bool>, mode: MaskMode, xi: f64) -> Result<Self> {
        if bits.len() != m * workers {
            return Err(Error::dim("mask matrix", m * workers, bits.len()));
        }
        Ok(MaskMatrix {
            bits,
            m,
            workers,
            mode,
            xi,
        })
    }

    pub fn zeros(m: usize, workers: usize) -> Self {
        MaskMatrix {
            bits: vec![false; m * workers],
            m,
            workers,
            mode: MaskMode::Bernoulli,
            xi: 0.0,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn get(&self, r: usize, s: usize) -> bool {
        self.bits[r * self.workers + s]
    }

    pub fn column(&self, s: usize) -> Vec<bool> {
        (0..self.m).map(|r| self.get(r, s)).collect()
    }

    pub fn row_count(&self, r: usize) -> usize {
        self.bits[r * self.workers..(r + 1) * self.workers]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn column_count(&self, s: usize) -> usize {
        (0..self.m).filter(|&r| self.get(r, s)).count()
    }

    /// `N_r = max(sum_s M[r][s], 1)`.
    pub fn normalizer(&self, r: usize) -> f64 {
        self.row_count(r).max(1) as f64
    }

    /// `N_perp_r = min(sum_s M[r][s], 1)`.
    pub fn active(&self, r: usize) -> f64 {
        self.row_count(r).min(1) as f64
    }
}

pub fn sample_masks(m: usize, workers: usize, xi: f64, mode: MaskMode, rng: &mut Rng) -> Result<MaskMatrix> {
    if workers == 0 {
        return Err(Error::Config("subnetwork count S must be at least 1".into()));
    }
    let bits = match mode {
        MaskMode::Bernoulli => {
            if !(xi > 0.0 && xi <= 1.0) {
                return Err(Error::Config(format!("xi={xi} outside (0, 1]")));
            }
            (0..m * workers).map(|_| rng.random_bool(xi)).collect()
        }
        MaskMode::Disjoint => {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(rng);
            let mut bits = vec![false; m * workers];
            for (k, &r) in order.iter().enumerate() {
                bits[r * workers + k % workers] = true;
            }
            bits
        }
    };
    MaskMatrix::from_bits(m, workers, bits, mode, xi)
}

/// `nu[r][r'] = (N_perp_r / N_r) * sum_s M[r][s] M[r'][s]`.
pub fn nu_matrix(masks: &MaskMatrix) -> Tensor {
    let m = masks.m();
    let mut nu = Tensor::zeros(&[m, m]);
    for r in 0..m {
        let scale = masks.active(r) / masks.normalizer(r);
        if scale == 0.0 {
            continue;
        }
        let row = nu.row_mut(r);
        for s in (0..masks.workers()).filter(|&s| masks.get(r, s)) {
            for (rp, v) in row.iter_mut().enumerate() {
                if masks.get(rp, s) {
                    *v += scale;
                }
            }
        }
    }
    nu
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentRow {
    pub quantity: &'static str,
    pub estimate: f64,
    pub std_err: f64,
    /// Closed form as commonly stated for the LoFT analysis.
    pub stated: f64,
    /// Exact expectation under Bernoulli masks.
    pub exact: f64,
}

impl MomentRow {
    pub fn within(&self, reference: f64, sigmas: f64) -> bool {
        (self.estimate - reference).abs() <= sigmas * self.std_err + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub xi: f64,
    pub workers: usize,
    pub trials: usize,
    pub theta: f64,
    pub rows: Vec<MomentRow>,
}

impl MomentTable {
    pub fn row(&self, quantity: &str) -> &MomentRow {
        self.rows
            .iter()
            .find(|r| r.quantity == quantity)
            .unwrap_or_else(|| panic!("no moment row {quantity}"))
    }
}

/// `E[1{K >= 1} / K]` for `K ~ Binomial(S, xi)`.
pub fn expected_inverse_count(xi: f64, workers: usize) -> f64 {
    let mut binom = 1.0;
    let mut total = 0.0;
    for k in 1..=workers {
        binom *= (workers - k + 1) as f64 / k as f64;
        total += binom * xi.powi(k as i32) * (1.0 - xi).powi((workers - k) as i32) / k as f64;
    }
    total
}

struct Running {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Running {
    fn new() -> Self {
        Running {
            n: 0.0,
            sum: 0.0,
            sum_sq: 0.0,
        }
    }
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum_sq += v * v;
    }
    fn mean(&self) -> f64 {
        self.sum / self.n
    }
    /// Floored at `1/n`: every tracked quantity lies in `[0, 1]`, and a rare
    /// event that never fires would otherwise report zero spread.
    fn std_err(&self) -> f64 {
        let mean = self.mean();
        let var = (self.sum_sq / self.n - mean * mean).max(0.0) * self.n / (self.n - 1.0);
        (var / self.n).sqrt().max(1.0 / self.n)
    }
}

/// Monte Carlo moments of `nu` and `N_perp` under Bernoulli masks. Each trial
/// draws two filter rows `r != r'` over `S` subnetworks.
pub fn mask_moments(xi: f64, workers: usize, trials: usize, rng: &mut Rng) -> Result<MomentTable> {
    if trials < 10_000 {
        return Err(Error::Config(format!(
            "mask_moments needs at least 1e4 trials, got {trials}"
        )));
    }
    if !(xi > 0.0 && xi <= 1.0) || workers == 0 {
        return Err(Error::Config(format!("invalid (xi, S) = ({xi}, {workers})")));
    }
    let th = theta(xi, workers);
    let mut diff = Running::new();
    let mut diff_sq = Running::new();
    let mut same = Running::new();
    let mut same_sq = Running::new();
    let mut active = Running::new();
    for _ in 0..trials {
        let mut count = 0usize;
        let mut shared = 0usize;
        for _ in 0..workers {
            let a = rng.random_bool(xi);
            let b = rng.random_bool(xi);
            count += a as usize;
            shared += (a && b) as usize;
        }
        let n_perp = count.min(1) as f64;
        let nu_diff = n_perp / count.max(1) as f64 * shared as f64;
        let nu_same = n_perp / count.max(1) as f64 * count as f64;
        diff.push(nu_diff);
        diff_sq.push(nu_diff * nu_diff);
        same.push(nu_same);
        same_sq.push(nu_same * nu_same);
        active.push(n_perp);
    }
    let s = workers as f64;
    let exact_diff_sq = xi * xi * th + xi * (1.0 - xi) * expected_inverse_count(xi, workers);
    let row = |quantity, acc: &Running, stated, exact| MomentRow {
        quantity,
        estimate: acc.mean(),
        std_err: acc.std_err(),
        stated,
        exact,
    };
    Ok(MomentTable {
        xi,
        workers,
        trials,
        theta: th,
        rows: vec![
            row("nu_cross", &diff, xi * th, xi * th),
            row(
                "nu_cross_sq",
                &diff_sq,
                xi * xi * th * th + th * th * (1.0 - xi) / s,
                exact_diff_sq,
            ),
            row("nu_self", &same, th, th),
            row("nu_self_sq", &same_sq, th, th),
            row("active", &active, th, th),
        ],
    })
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub normalizer: Vec<f64>,
    pub active: Vec<f64>,
    /// Aggregate surrogate direction, `m x d`.
    pub g: Tensor,
    /// Mixed outputs `u_tilde[r][i]`, `m x n`, when materialized.
    pub u_tilde: Option<Tensor>,
}

fn check_masks(state: &TheoryModelState, masks: &MaskMatrix) -> Result<()> {
    if masks.m() != state.m() {
        return Err(Error::dim("mask rows", state.m(), masks.m()));
    }
    Ok(())
}

fn finite_or(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            iteration: 0,
            detail: format!("non-finite {what}"),
        })
    }
}

fn loft_direction(state: &TheoryModelState, acts: &Activations, masks: &MaskMatrix) -> StepReport {
    let (m, n) = (state.m(), state.n());
    let y = state.labels();
    let normalizer: Vec<f64> = (0..m).map(|r| masks.normalizer(r)).collect();
    let active: Vec<f64> = (0..m).map(|r| masks.active(r)).collect();
    let mut coef = vec![0.0; m * n];
    for s in 0..masks.workers() {
        let u = acts.masked_output(|r| masks.get(r, s));
        for r in (0..m).filter(|&r| masks.get(r, s)) {
            for i in 0..n {
                coef[r * n + i] += 2.0 * (u[i] - y[i]);
            }
        }
    }
    for r in 0..m {
        let scale = active[r] / normalizer[r];
        coef[r * n..(r + 1) * n].iter_mut().for_each(|c| *c *= scale);
    }
    let g = state.weighted_features(acts, &coef);
    StepReport {
        normalizer,
        active,
        g,
        u_tilde: None,
    }
}

/// One LoFT iteration: `w_r <- w_r - eta * (N_perp_r / N_r) * sum_s grad_s`.
pub fn loft_step(state: &TheoryModelState, masks: &MaskMatrix) -> Result<(Tensor, StepReport)> {
    check_masks(state, masks)?;
    let acts = state.activations();
    let report = loft_direction(state, &acts, masks);
    finite_or(&report.g, "LoFT direction")?;
    let mut w = state.w.clone();
    w.axpy(-state.eta, &report.g)?;
    finite_or(&w, "LoFT weights")?;
    Ok((w, report))
}

/// The same update through the mixed outputs
/// `u_tilde[r][i] = sum_r' nu[r][r'] * c[r'][i]`, with
/// `g_r = sum_i 2 (u_tilde[r][i] - N_perp_r y_i) * features`.
pub fn loft_step_mixed(state: &TheoryModelState, masks: &MaskMatrix) -> Result<(Tensor, StepReport)> {
    check_masks(state, masks)?;
    let (m, n) = (state.m(), state.n());
    let acts = state.activations();
    let nu = nu_matrix(masks);
    let mut u_tilde = Tensor::zeros(&[m, n]);
    for r in 0..m {
        let nu_r = nu.row(r);
        let out = u_tilde.row_mut(r);
        for (rp, &v) in nu_r.iter().enumerate() {
            if v != 0.0 {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += v * acts.contrib[rp * n + i];
                }
            }
        }
    }
    let y = state.labels();
    let active: Vec<f64> = (0..m).map(|r| masks.active(r)).collect();
    let mut coef = vec![0.0; m * n];
    for r in 0..m {
        for i in 0..n {
            coef[r * n + i] = 2.0 * (u_tilde.row(r)[i] - active[r] * y[i]);
        }
    }
    let g = state.weighted_features(&acts, &coef);
    finite_or(&g, "LoFT direction")?;
    let mut w = state.w.clone();
    w.axpy(-state.eta, &g)?;
    Ok((
        w,
        StepReport {
            normalizer: (0..m).map(|r| masks.normalizer(r)).collect(),
            active,
            g,
            u_tilde: Some(u_tilde),
        },
    ))
}

/// Dense baseline `w <- w - eta * (theta / xi) * grad L` with
/// `theta = 1 - (1 - xi)^S`.
pub fn gd_step(state: &TheoryModelState, workers: usize) -> Tensor {
    gd_from(state, &state.activations(), workers)
}

fn gd_from(state: &TheoryModelState, acts: &Activations, workers: usize) -> Tensor {
    let g = full_gradient(state, acts);
    let mut w = state.w.clone();
    w.axpy(-state.eta * theta(state.xi, workers) / state.xi, &g)
        .expect("gradient has the shape of W");
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    /// `||u_t - y||^2` along the LoFT trajectory.
    pub loss: f64,
    /// `||u_hat_t - y||^2` along the GD trajectory.
    pub baseline_loss: f64,
    pub weight_dev: f64,
    pub output_dev: f64,
    /// `max_r ||w_{r,t} - w_{r,0}||`.
    pub drift: f64,
}

#[derive(Debug, Clone)]
pub struct DeviationReport {
    /// `||W_T - W_hat_T||_F^2`.
    pub weight_dev: f64,
    /// `sum_{t < T} ||u_t - u_hat_t||^2`.
    pub output_dev_sum: f64,
    pub loss_curve: Vec<f64>,
    /// Largest per-filter drift from initialization over the whole run.
    pub weight_drift: f64,
    pub records: Vec<IterationRecord>,
    pub eta: f64,
    pub lambda0: f64,
    pub theta: f64,
    pub m: usize,
}

fn max_row_drift(w: &Tensor, w0: &Tensor) -> f64 {
    (0..w.shape()[0])
        .map(|r| {
            w.row(r)
                .iter()
                .zip(w0.row(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Runs `T` LoFT iterations (fresh masks each time) and `T` steps of the
/// scaled GD baseline from the same initialization.
pub fn run_paired_trajectories(cfg: &TheoryConfig, data: &TheoryDataset) -> Result<DeviationReport> {
    let init = init_theory_model(cfg, data)?;
    run_paired_from(cfg, &init)
}

pub fn run_paired_from(cfg: &TheoryConfig, init: &TheoryModelState) -> Result<DeviationReport> {
    let y = init.labels().to_vec();
    let w0 = init.w.clone();
    let mut loft = init.clone();
    let mut base = init.clone();
    let mut records = Vec::with_capacity(cfg.iterations + 1);
    let mut output_dev_sum = 0.0;
    let mut drift_max: f64 = 0.0;
    let mut initial_loss = None;
    let th = theta(cfg.xi, cfg.workers);

    for t in 0..=cfg.iterations {
        let acts = loft.activations();
        let acts_hat = base.activations();
        let u = acts.full_output(loft.xi);
        let u_hat = acts_hat.full_output(base.xi);
        let loss = residual_sq(&u, &y);
        let baseline_loss = residual_sq(&u_hat, &y);
        let output_dev = residual_sq(&u, &u_hat);
        let weight_dev = loft.w.sub(&base.w)?.frobenius_sq();
        let drift = max_row_drift(&loft.w, &w0);
        if ![loss, baseline_loss, output_dev, weight_dev]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Numerical {
                iteration: t,
                detail: "non-finite loss or deviation".into(),
            });
        }
        let reference = *initial_loss.get_or_insert(loss.max(baseline_loss).max(f64::MIN_POSITIVE));
        let worst = loss.max(baseline_loss);
        if worst > 1e6 * reference {
            return Err(Error::Divergence {
                iteration: t,
                loss: worst,
                eta: init.eta,
                lambda0: init.lambda0,
            });
        }
        drift_max = drift_max.max(drift);
        records.push(IterationRecord {
            t,
            loss,
            baseline_loss,
            weight_dev,
            output_dev,
            drift,
        });
        if t == cfg.iterations {
            break;
        }
        output_dev_sum += output_dev;

        let mut mask_rng = rng::stream(cfg.seed, domain::MASKS, t as u64, 0);
        let masks = sample_masks(cfg.m, cfg.workers, cfg.xi, cfg.mask_mode, &mut mask_rng)?;
        let report = loft_direction(&loft, &acts, &masks);
        let mut w = loft.w.clone();
        w.axpy(-loft.eta, &report.g)?;
        let w_hat = gd_from(&base, &acts_hat, cfg.workers);
        loft.w = w;
        base.w = w_hat;
    }

    let last = records.last().expect("at least one record");
    Ok(DeviationReport {
        weight_dev: last.weight_dev,
        output_dev_sum,
        loss_curve: records.iter().map(|r| r.loss).collect(),
        weight_drift: drift_max,
        records,
        eta: init.eta,
        lambda0: init.lambda0,
        theta: th,
        m: cfg.m,
    })
}

/// Linear-rate fit of a loss curve against the predicted contraction
/// `1 - theta * eta * lambda0 / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub plateau: f64,
    /// Least-squares slope of `ln(loss_t - plateau)` over the first half.
    pub slope: f64,
    /// `ln(1 - theta * eta * lambda0 / 2)`.
    pub predicted: f64,
    /// Slope at least half as steep as predicted, and the tail no higher than
    /// the start.
    pub geometric: bool,
}

pub fn fit_linear_rate(loss: &[f64], theta: f64, eta: f64, lambda0: f64) -> RateFit {
    let len = loss.len();
    let tail = (len / 10).max(1);
    let plateau = loss[len - tail..].iter().copied().fold(f64::INFINITY, f64::min);
    let pts: Vec<(f64, f64)> = loss[..len.div_ceil(2)]
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > plateau)
        .map(|(t, &l)| (t as f64, (l - plateau).ln()))
        .collect();
    let slope = if pts.len() < 2 {
        f64::NEG_INFINITY
    } else {
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    };
    let predicted = (1.0 - theta * eta * lambda0 / 2.0).ln();
    RateFit {
        plateau,
        slope,
        predicted,
        geometric: slope <= 0.5 * predicted && plateau <= loss[0],
    }
}

/// Plateau level of a loss curve: mean of its final tenth.
pub fn plateau_level(loss: &[f64]) -> f64 {
    let tail = (loss.len() / 10).max(1);
    loss[loss.len() - tail..].iter().sum::<f64>() / tail as f64
}
