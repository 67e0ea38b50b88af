//! One-hidden-layer ReLU CNN with a fixed second layer.
//!
//! The network output for patched sample `i` is
//! `u_i = xi * sum_r sum_j a[r][j] * relu(<xhat_i^(j), w_r>)`, trained on
//! `L(W) = ||u - y||^2`. Subnetworks drop the `xi` scale and keep only the
//! filters selected by a binary mask. ReLU derivatives use the indicator
//! `1{<x, w> >= 0}` (equality included).

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, domain, Rng};
use crate::tensor::{normalize_dataset, patch, PatchSpec, Tensor};

/// How subnetwork masks are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every entry i.i.d. Bernoulli(xi).
    Bernoulli,
    /// Every filter in exactly one subnetwork, balanced sizes.
    Disjoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConfig {
    pub m: usize,
    pub n: usize,
    pub d_hat: usize,
    pub height: usize,
    pub width: usize,
    pub q: usize,
    /// Initialization scale; `None` means `1/sqrt(n)`.
    pub kappa: Option<f64>,
    pub xi: f64,
    pub eta_coeff: f64,
    pub workers: usize,
    pub iterations: usize,
    /// Failure-probability parameter, carried for reporting only.
    pub delta: f64,
    pub label_bound: f64,
    pub mask_mode: MaskMode,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            m: 256,
            n: 16,
            d_hat: 1,
            height: 4,
            width: 4,
            q: 9,
            kappa: None,
            xi: 0.5,
            eta_coeff: 1.0,
            workers: 4,
            iterations: 200,
            delta: 0.1,
            label_bound: 1.0,
            mask_mode: MaskMode::Bernoulli,
            seed: 0,
        }
    }
}

impl TheoryConfig {
    pub fn p(&self) -> usize {
        self.height * self.width
    }

    pub fn d(&self) -> usize {
        self.q * self.d_hat
    }

    pub fn kappa(&self) -> f64 {
        self.kappa.unwrap_or_else(|| 1.0 / (self.n as f64).sqrt())
    }

    /// `1 - (1 - xi)^S`: probability that a filter is trained somewhere.
    pub fn theta(&self) -> f64 {
        theta(self.xi, self.workers)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("n", self.n),
            ("d_hat", self.d_hat),
            ("height", self.height),
            ("width", self.width),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        PatchSpec::new(self.q)?;
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::Config(format!("xi={} outside (0, 1]", self.xi)));
        }
        if !(self.kappa() >= 0.0 && self.kappa().is_finite()) {
            return Err(Error::Config("kappa must be finite and non-negative".into()));
        }
        if !(self.eta_coeff > 0.0 && self.eta_coeff.is_finite()) {
            return Err(Error::Config("eta_coeff must be positive".into()));
        }
        if !(self.label_bound > 0.0) {
            return Err(Error::Config("label bound C must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta={} outside (0, 1)", self.delta)));
        }
        Ok(())
    }
}

pub fn theta(xi: f64, workers: usize) -> f64 {
    1.0 - (1.0 - xi).powi(workers as i32)
}

/// Raw (unpatched) regression data: images `d_hat x h x w` and labels.
#[derive(Debug, Clone)]
pub struct TheoryDataset {
    pub x: Vec<Tensor>,
    pub y: Vec<f64>,
}

/// Gaussian images normalized to `||x||_F = q^{-1/2}`, labels uniform on
/// `[-C, C]`.
pub fn synthetic_dataset(cfg: &TheoryConfig, rng: &mut Rng) -> Result<TheoryDataset> {
    cfg.validate()?;
    let shape = [cfg.d_hat, cfg.height, cfg.width];
    let len: usize = shape.iter().product();
    let raw = (0..cfg.n)
        .map(|_| {
            let v = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::from_vec(&shape, v)
        })
        .collect::<Result<Vec<_>>>()?;
    let y = (0..cfg.n)
        .map(|_| rng.random_range(-cfg.label_bound..=cfg.label_bound))
        .collect();
    let normalized = normalize_dataset(&raw, cfg.q)?;
    Ok(TheoryDataset {
        x: normalized.samples,
        y,
    })
}

#[derive(Debug, Clone)]
pub struct TheoryModelState {
    /// First-layer weights, `m x d`.
    pub w: Tensor,
    /// Fixed second layer, `m x p`, entries `+-1/(p sqrt m)`.
    a: Tensor,
    pub xi: f64,
    pub kappa: f64,
    pub eta: f64,
    pub lambda0: f64,
    /// Patched samples, each `d x p`.
    xhat: Vec<Tensor>,
    y: Vec<f64>,
    /// Patch columns laid out `[n][p][d]`.
    cols: Vec<f64>,
    m: usize,
    n: usize,
    p: usize,
    d: usize,
}

impl TheoryModelState {
    /// Builds a state from explicit parts. `xhat` are patched samples
    /// (`d x p` each).
    pub fn from_parts(
        w: Tensor,
        a: Tensor,
        xi: f64,
        kappa: f64,
        eta: f64,
        xhat: Vec<Tensor>,
        y: Vec<f64>,
    ) -> Result<Self> {
        let [m, d] = *w.shape() else {
            return Err(Error::dim("theory W", "[m, d]", format!("{:?}", w.shape())));
        };
        let [ma, p] = *a.shape() else {
            return Err(Error::dim("theory a", "[m, p]", format!("{:?}", a.shape())));
        };
        if ma != m {
            return Err(Error::dim("theory a rows", m, ma));
        }
        if xhat.len() != y.len() || xhat.is_empty() {
            return Err(Error::dim("theory labels", xhat.len(), y.len()));
        }
        let scale = 1.0 / (p as f64 * (m as f64).sqrt());
        if a.data().iter().any(|&v| (v.abs() - scale).abs() > 1e-12 * scale) {
            return Err(Error::Precondition(format!(
                "second-layer entries must be +-1/(p sqrt m) = {scale:e}"
            )));
        }
        if !(xi > 0.0 && xi <= 1.0) {
            return Err(Error::Config(format!("xi={xi} outside (0, 1]")));
        }
        let n = xhat.len();
        let mut cols = vec![0.0; n * p * d];
        for (i, x) in xhat.iter().enumerate() {
            if x.shape() != [d, p] {
                return Err(Error::dim(
                    "patched sample",
                    format!("[{d}, {p}]"),
                    format!("{:?}", x.shape()),
                ));
            }
            for k in 0..d {
                for j in 0..p {
                    cols[(i * p + j) * d + k] = x.data()[k * p + j];
                }
            }
        }
        Ok(TheoryModelState {
            w,
            a,
            xi,
            kappa,
            eta,
            lambda0: f64::NAN,
            xhat,
            y,
            cols,
            m,
            n,
            p,
            d,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn a(&self) -> &Tensor {
        &self.a
    }
    pub fn xhat(&self) -> &[Tensor] {
        &self.xhat
    }
    pub fn labels(&self) -> &[f64] {
        &self.y
    }

    /// Same model and data with different first-layer weights.
    pub fn with_weights(&self, w: Tensor) -> Result<Self> {
        if w.shape() != self.w.shape() {
            return Err(Error::dim(
                "with_weights",
                format!("{:?}", self.w.shape()),
                format!("{:?}", w.shape()),
            ));
        }
        Ok(TheoryModelState { w, ..self.clone() })
    }

    /// Smallest `|<xhat_i^(j), w_r>|`; finite differences with a step below
    /// this never cross a ReLU kink.
    pub fn kink_margin(&self) -> f64 {
        self.activations().min_abs_preactivation()
    }

    #[inline]
    fn col(&self, i: usize, j: usize) -> &[f64] {
        let off = (i * self.p + j) * self.d;
        &self.cols[off..off + self.d]
    }

    pub(crate) fn activations(&self) -> Activations {
        let (m, n, p) = (self.m, self.n, self.p);
        let mut pre = vec![0.0; m * n * p];
        let mut contrib = vec![0.0; m * n];
        for r in 0..m {
            let wr = self.w.row(r);
            let ar = self.a.row(r);
            for i in 0..n {
                let mut c = 0.0;
                for j in 0..p {
                    let z: f64 = self.col(i, j).iter().zip(wr).map(|(x, w)| x * w).sum();
                    pre[(r * n + i) * p + j] = z;
                    c += ar[j] * z.max(0.0);
                }
                contrib[r * n + i] = c;
            }
        }
        Activations { pre, contrib, m, n }
    }

    /// Row `r` of the result is `sum_i coef[r][i] * sum_j a[r][j] xhat_i^(j) 1{z >= 0}`.
    pub(crate) fn weighted_features(&self, acts: &Activations, coef: &[f64]) -> Tensor {
        let (m, n, p, d) = (self.m, self.n, self.p, self.d);
        let mut out = Tensor::zeros(&[m, d]);
        for r in 0..m {
            let ar = self.a.row(r);
            let row = out.row_mut(r);
            for i in 0..n {
                let c = coef[r * n + i];
                if c == 0.0 {
                    continue;
                }
                for j in 0..p {
                    if acts.pre[(r * n + i) * p + j] >= 0.0 {
                        let s = c * ar[j];
                        for (o, x) in row.iter_mut().zip(self.col(i, j)) {
                            *o += s * x;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Cached pre-activations `z[r][i][j]` and per-filter outputs
/// `c[r][i] = sum_j a[r][j] relu(z[r][i][j])`.
pub(crate) struct Activations {
    pub pre: Vec<f64>,
    pub contrib: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

impl Activations {
    pub fn full_output(&self, xi: f64) -> Vec<f64> {
        let mut u = vec![0.0; self.n];
        for r in 0..self.m {
            for (i, ui) in u.iter_mut().enumerate() {
                *ui += self.contrib[r * self.n + i];
            }
        }
        u.iter_mut().for_each(|v| *v *= xi);
        u
    }

    pub fn masked_output(&self, mask: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut u = vec![0.0; self.n];
        for r in (0..self.m).filter(|&r| mask(r)) {
            for (i, ui) in u.iter_mut().enumerate() {
                *ui += self.contrib[r * self.n + i];
            }
        }
        u
    }

    fn min_abs_preactivation(&self) -> f64 {
        self.pre.iter().map(|z| z.abs()).fold(f64::INFINITY, f64::min)
    }
}

/// Draws `W` (rows `N(0, kappa^2 I)`) and the sign layer `a`, patches the data,
/// computes `lambda0` and sets `eta = eta_coeff * lambda0 / n^2`.
pub fn init_theory_model(cfg: &TheoryConfig, data: &TheoryDataset) -> Result<TheoryModelState> {
    cfg.validate()?;
    if data.x.len() != cfg.n || data.y.len() != cfg.n {
        return Err(Error::dim("theory dataset size", cfg.n, data.x.len()));
    }
    let target = 1.0 / (cfg.q as f64).sqrt();
    for (i, x) in data.x.iter().enumerate() {
        if x.shape() != [cfg.d_hat, cfg.height, cfg.width] {
            return Err(Error::dim(
                "theory sample",
                format!("[{}, {}, {}]", cfg.d_hat, cfg.height, cfg.width),
                format!("{:?}", x.shape()),
            ));
        }
        if (x.frobenius() - target).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "sample {i} has norm {} but must be normalized to q^(-1/2) = {target}",
                x.frobenius()
            )));
        }
    }
    if let Some(bad) = data.y.iter().find(|y| y.abs() > cfg.label_bound) {
        return Err(Error::Precondition(format!(
            "label {bad} exceeds bound C = {}",
            cfg.label_bound
        )));
    }
    let spec = PatchSpec::new(cfg.q)?;
    let xhat = data.x.iter().map(|x| patch(x, spec)).collect::<Result<Vec<_>>>()?;

    let (m, d, p) = (cfg.m, cfg.d(), cfg.p());
    let kappa = cfg.kappa();
    let mut rng = rng::stream(cfg.seed, domain::INIT, 0, 0);
    let w = if kappa == 0.0 {
        Tensor::zeros(&[m, d])
    } else {
        let normal = Normal::new(0.0, kappa).map_err(|e| Error::Config(e.to_string()))?;
        Tensor::from_vec(&[m, d], (0..m * d).map(|_| normal.sample(&mut rng)).collect())?
    };
    let scale = 1.0 / (p as f64 * (m as f64).sqrt());
    let a = Tensor::from_vec(
        &[m, p],
        (0..m * p)
            .map(|_| if rng.random::<bool>() { scale } else { -scale })
            .collect(),
    )?;
    let (_, lambda0) = ntk_infinite(&xhat)?;
    let n = cfg.n as f64;
    let eta = cfg.eta_coeff * lambda0 / (n * n);
    let mut state = TheoryModelState::from_parts(w, a, cfg.xi, kappa, eta, xhat, data.y.clone())?;
    state.lambda0 = lambda0;
    Ok(state)
}

/// `u_i = xi * sum_r sum_j a_rj relu(<xhat_i^(j), w_r>)`.
pub fn forward_full(state: &TheoryModelState) -> Tensor {
    let u = state.activations().full_output(state.xi);
    Tensor::from_vec(&[state.n], u).expect("length n")
}

fn check_mask(state: &TheoryModelState, mask: &[bool]) -> Result<()> {
    if mask.len() != state.m {
        return Err(Error::dim("subnetwork mask", state.m, mask.len()));
    }
    Ok(())
}

/// Unscaled output of the subnetwork keeping the filters where `mask` is set.
pub fn forward_subnetwork(state: &TheoryModelState, mask: &[bool]) -> Result<Tensor> {
    check_mask(state, mask)?;
    let u = state.activations().masked_output(|r| mask[r]);
    Tensor::from_vec(&[state.n], u)
}

/// `||u - y||^2` for the full (scaled) network.
pub fn loss(state: &TheoryModelState) -> f64 {
    residual_sq(forward_full(state).data(), &state.y)
}

pub(crate) fn residual_sq(u: &[f64], y: &[f64]) -> f64 {
    u.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Gradient of `||f_mask(X, W) - y||^2` with respect to `W`; rows outside
/// the mask are zero.
pub fn grad_subnetwork(state: &TheoryModelState, mask: &[bool]) -> Result<Tensor> {
    check_mask(state, mask)?;
    let acts = state.activations();
    Ok(subnetwork_gradient(state, &acts, mask))
}

pub(crate) fn subnetwork_gradient(state: &TheoryModelState, acts: &Activations, mask: &[bool]) -> Tensor {
    let n = state.n;
    let u = acts.masked_output(|r| mask[r]);
    let mut coef = vec![0.0; state.m * n];
    for (r, _) in mask.iter().enumerate().filter(|(_, &on)| on) {
        for i in 0..n {
            coef[r * n + i] = 2.0 * (u[i] - state.y[i]);
        }
    }
    state.weighted_features(acts, &coef)
}

/// Gradient of `||u - y||^2` for the scaled full network.
pub fn grad_full(state: &TheoryModelState) -> Tensor {
    let acts = state.activations();
    full_gradient(state, &acts)
}

pub(crate) fn full_gradient(state: &TheoryModelState, acts: &Activations) -> Tensor {
    let n = state.n;
    let u = acts.full_output(state.xi);
    let coef_i: Vec<f64> = (0..n).map(|i| 2.0 * state.xi * (u[i] - state.y[i])).collect();
    let coef: Vec<f64> = (0..state.m).flat_map(|_| coef_i.iter().copied()).collect();
    state.weighted_features(acts, &coef)
}

/// Finite-width NTK
/// `H_ii' = sum_r sum_{j,j'} a_rj a_rj' <xhat_i^(j), xhat_i'^(j')> 1{..;w_r} 1{..;w_r}`.
pub fn ntk_finite(state: &TheoryModelState) -> Tensor {
    let (m, n, d) = (state.m, state.n, state.d);
    let acts = state.activations();
    let mut h = Tensor::zeros(&[n, n]);
    let mut feats = vec![0.0; n * d];
    for r in 0..m {
        feats.fill(0.0);
        let ar = state.a.row(r);
        for i in 0..n {
            let f = &mut feats[i * d..(i + 1) * d];
            for j in 0..state.p {
                if acts.pre[(r * n + i) * state.p + j] >= 0.0 {
                    for (o, x) in f.iter_mut().zip(state.col(i, j)) {
                        *o += ar[j] * x;
                    }
                }
            }
        }
        let hd = h.data_mut();
        for i in 0..n {
            for k in i..n {
                let v: f64 = feats[i * d..(i + 1) * d]
                    .iter()
                    .zip(&feats[k * d..(k + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                hd[i * n + k] += v;
            }
        }
    }
    let hd = h.data_mut();
    for i in 0..n {
        for k in 0..i {
            hd[i * n + k] = hd[k * n + i];
        }
    }
    h
}

/// `P(<u, w> >= 0 and <v, w> >= 0)` for `w ~ N(0, I)`: `(pi - arccos rho) / (2 pi)`.
/// Zero vectors contribute 0.
pub fn halfspace_overlap(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    let rho = (u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)).clamp(-1.0, 1.0);
    (PI - rho.acos()) / (2.0 * PI)
}

/// Infinite-width NTK and its smallest eigenvalue `lambda0`.
pub fn ntk_infinite(xhat: &[Tensor]) -> Result<(Tensor, f64)> {
    let n = xhat.len();
    if n == 0 {
        return Err(Error::DegenerateInput("empty dataset".into()));
    }
    let [d, p] = *xhat[0].shape() else {
        return Err(Error::dim("ntk_infinite", "[d, p]", format!("{:?}", xhat[0].shape())));
    };
    if let Some(bad) = xhat.iter().find(|x| x.shape() != [d, p]) {
        return Err(Error::dim(
            "ntk_infinite",
            format!("[{d}, {p}]"),
            format!("{:?}", bad.shape()),
        ));
    }
    let column = |x: &Tensor, j: usize| -> Vec<f64> { (0..d).map(|k| x.data()[k * p + j]).collect() };
    let cols: Vec<Vec<Vec<f64>>> = xhat.iter().map(|x| (0..p).map(|j| column(x, j)).collect()).collect();
    let mut h = Tensor::zeros(&[n, n]);
    let scale = 1.0 / (p as f64 * p as f64);
    for i in 0..n {
        for k in i..n {
            let mut s = 0.0;
            for j in 0..p {
                let (u, v) = (&cols[i][j], &cols[k][j]);
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                s += dot * halfspace_overlap(u, v);
            }
            h.data_mut()[i * n + k] = s * scale;
            h.data_mut()[k * n + i] = s * scale;
        }
    }
    let lambda0 = linalg::symmetric_eigenvalues(&h)[0];
    if lambda0 <= 1e-12 {
        return Err(Error::DegenerateKernel { lambda0 });
    }
    Ok((h, lambda0))
}
