//! Dense row-major `f64` tensors, the patching operator and the fixed
//! 3x3 / stride-1 / pad-1 convolution used everywhere else in the crate.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim("Tensor::from_vec", len, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of one slice along the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Contiguous slice `i` along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::dim("Tensor::reshape", len, self.data.len()));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                context,
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::sub")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "Tensor::axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "Tensor::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Square patch geometry: `q = k*k` pixels per patch, zero padding `(k-1)/2`,
/// stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    q: usize,
    side: usize,
}

impl PatchSpec {
    pub fn new(q: usize) -> Result<Self> {
        let side = (q as f64).sqrt().round() as usize;
        if q == 0 || side * side != q || side.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "patch size q={q} must be the square of an odd integer"
            )));
        }
        Ok(PatchSpec { q, side })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pad(&self) -> usize {
        (self.side - 1) / 2
    }
}

fn image_dims(x: &Tensor, context: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        [c, p] => Ok((c, 1, p)),
        _ => Err(Error::dim(context, "rank 2 or 3", x.rank())),
    }
}

/// Patching operator: maps a `c x h x w` image (or `c x p`, read as a single
/// row of pixels) to a `(q*c) x p` matrix whose column `j` holds the `q`
/// zero-padded neighbours of pixel `j` for every channel. Row index is
/// `channel * q + ky * side + kx`.
pub fn patch(x: &Tensor, spec: PatchSpec) -> Result<Tensor> {
    let (c, h, w) = image_dims(x, "patch")?;
    let (q, k, pad) = (spec.q(), spec.side(), spec.pad() as isize);
    let p = h * w;
    let mut out = Tensor::zeros(&[q * c, p]);
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ch * q + ky * k + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[row * p + y * w + xx] = src[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`patch`]: scatter-adds every patch entry back onto its source
/// pixel. `shape` is the `[c, h, w]` (or `[c, p]`) shape of the original image.
pub fn unpatch_sum(cols: &Tensor, shape: &[usize], spec: PatchSpec) -> Result<Tensor> {
    let mut out = Tensor::zeros(shape);
    let (c, h, w) = image_dims(&out, "unpatch_sum")?;
    let (q, k, pad) = (spec.q(), spec.side(), spec.pad() as isize);
    let p = h * w;
    if cols.shape() != [q * c, p] {
        return Err(Error::dim(
            "unpatch_sum",
            format!("[{}, {}]", q * c, p),
            format!("{:?}", cols.shape()),
        ));
    }
    let src = cols.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ch * q + ky * k + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[(ch * h + sy as usize) * w + sx as usize] += src[row * p + y * w + xx];
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv_dims(input: &Tensor, filters: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let [c_in, h, w] = *input.shape() else {
        return Err(Error::dim(
            "conv2d input",
            "[c_in, h, w]",
            format!("{:?}", input.shape()),
        ));
    };
    let [c_out, fc, 3, 3] = *filters.shape() else {
        return Err(Error::dim(
            "conv2d filters",
            "[c_out, c_in, 3, 3]",
            format!("{:?}", filters.shape()),
        ));
    };
    if fc != c_in {
        return Err(Error::dim("conv2d channels", c_in, fc));
    }
    Ok((c_in, c_out, h, w))
}

/// Valid output range for a kernel offset `d` in {-1, 0, 1} along an axis of
/// length `n` with zero padding 1.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

/// 3x3 convolution (cross-correlation), stride 1, zero padding 1.
/// Output channel `o` accumulates input channels in ascending order.
pub fn conv2d_forward(input: &Tensor, filters: &Tensor) -> Result<Tensor> {
    let (c_in, c_out, h, w) = conv_dims(input, filters)?;
    let mut out = Tensor::zeros(&[c_out, h, w]);
    let x = input.data();
    let f = filters.data();
    let y = out.data_mut();
    for o in 0..c_out {
        let yo = &mut y[o * h * w..(o + 1) * h * w];
        for c in 0..c_in {
            let xc = &x[c * h * w..(c + 1) * h * w];
            let fk = &f[(o * c_in + c) * 9..(o * c_in + c + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..3 {
                    let wv = fk[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - 1;
                    let (x0, x1) = valid_range(dx, w);
                    for r in y0..y1 {
                        let sr = (r as isize + dy) as usize;
                        let dst = &mut yo[r * w + x0..r * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let src = &xc[sr * w + sx0..sr * w + sx0 + (x1 - x0)];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d_forward`]. Returns `(grad_input, grad_filters)`.
pub fn conv2d_backward(input: &Tensor, filters: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c_in, c_out, h, w) = conv_dims(input, filters)?;
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::dim(
            "conv2d_backward grad_out",
            format!("[{c_out}, {h}, {w}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut gin = Tensor::zeros(input.shape());
    let mut gf = Tensor::zeros(filters.shape());
    let x = input.data();
    let f = filters.data();
    let g = grad_out.data();
    {
        let gi = gin.data_mut();
        let gfd = gf.data_mut();
        for o in 0..c_out {
            let go = &g[o * h * w..(o + 1) * h * w];
            for c in 0..c_in {
                let xc = &x[c * h * w..(c + 1) * h * w];
                let base = (o * c_in + c) * 9;
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = valid_range(dy, h);
                    for kx in 0..3 {
                        let dx = kx as isize - 1;
                        let (x0, x1) = valid_range(dx, w);
                        let wv = f[base + ky * 3 + kx];
                        let sx0 = (x0 as isize + dx) as usize;
                        let mut acc = 0.0;
                        for r in y0..y1 {
                            let sr = (r as isize + dy) as usize;
                            let gor = &go[r * w + x0..r * w + x1];
                            let xs = &xc[sr * w + sx0..sr * w + sx0 + (x1 - x0)];
                            for (a, b) in gor.iter().zip(xs) {
                                acc += a * b;
                            }
                            let gis = &mut gi[c * h * w + sr * w + sx0..c * h * w + sr * w + sx0 + (x1 - x0)];
                            for (d, a) in gis.iter_mut().zip(gor) {
                                *d += wv * a;
                            }
                        }
                        gfd[base + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    Ok((gin, gf))
}

/// Result of [`normalize_dataset`].
#[derive(Debug, Clone)]
pub struct NormalizedDataset {
    pub samples: Vec<Tensor>,
    /// Index pairs `(i, i')` with `x_i == x_i'`.
    pub duplicates: Vec<(usize, usize)>,
}

/// Rescales every sample to Frobenius norm `q^{-1/2}` and reports duplicate
/// samples.
pub fn normalize_dataset(samples: &[Tensor], q: usize) -> Result<NormalizedDataset> {
    if q == 0 {
        return Err(Error::Config("patch size q must be positive".into()));
    }
    let target = 1.0 / (q as f64).sqrt();
    let mut out = Vec::with_capacity(samples.len());
    for (i, x) in samples.iter().enumerate() {
        let norm = x.frobenius();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "sample {i} has norm {norm}; cannot normalize"
            )));
        }
        if (norm - target).abs() <= 1e-15 {
            out.push(x.clone());
        } else {
            out.push(x.scale(target / norm));
        }
    }
    let mut duplicates = Vec::new();
    for i in 0..out.len() {
        for j in i + 1..out.len() {
            if out[i] == out[j] {
                duplicates.push((i, j));
            }
        }
    }
    if !duplicates.is_empty() {
        log::warn!(
            "dataset contains {} duplicate sample pair(s), e.g. {:?}",
            duplicates.len(),
            duplicates[0]
        );
    }
    Ok(NormalizedDataset {
        samples: out,
        duplicates,
    })
}
