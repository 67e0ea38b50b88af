//! Dataset sources: synthetic generators, IDX files and CSV tables.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::ImageSet;
use crate::rng::{self, domain, Rng};
use crate::tensor::{normalize_dataset, Tensor};
use crate::theory::TheoryDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    SyntheticTheory,
    SyntheticImages,
    IdxFiles,
    CsvFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    /// Training samples.
    pub n: usize,
    /// Held-out samples (image sources).
    pub n_test: usize,
    /// Channels.
    pub d_hat: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Label bound `C` for theory data.
    pub label_bound: f64,
    /// Scale image samples to unit Frobenius norm. Theory data is always
    /// scaled to `q^{-1/2}`.
    pub normalize: bool,
    /// Pixel noise standard deviation for synthetic images.
    pub noise: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub csv_train: Option<PathBuf>,
    pub csv_test: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DatasetSource::SyntheticImages,
            n: 400,
            n_test: 200,
            d_hat: 3,
            height: 8,
            width: 8,
            num_classes: 4,
            label_bound: 1.0,
            normalize: false,
            noise: 0.45,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            csv_train: None,
            csv_test: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_hat == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "dataset.n, d_hat, height and width must be positive".into(),
            ));
        }
        match self.source {
            DatasetSource::SyntheticTheory => {
                if !(self.label_bound > 0.0) {
                    return Err(Error::Config("dataset.label_bound must be positive".into()));
                }
            }
            DatasetSource::SyntheticImages => {
                if self.num_classes < 2 || self.num_classes > 8 {
                    return Err(Error::Config(
                        "dataset.num_classes must be in 2..=8 for synthetic images".into(),
                    ));
                }
                if self.height < 5 || self.width < 5 {
                    return Err(Error::Config("synthetic images need at least 5x5 pixels".into()));
                }
                if !(self.noise >= 0.0) {
                    return Err(Error::Config("dataset.noise must be non-negative".into()));
                }
            }
            DatasetSource::IdxFiles => {
                if self.train_images.is_none() || self.train_labels.is_none() {
                    return Err(Error::Config("idx_files needs train_images and train_labels".into()));
                }
            }
            DatasetSource::CsvFile => {
                if self.csv_train.is_none() {
                    return Err(Error::Config("csv_file needs csv_train".into()));
                }
            }
        }
        if self.source != DatasetSource::SyntheticTheory && self.num_classes < 2 {
            return Err(Error::Config("dataset.num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// Theory regression data: Gaussian images scaled to `q^{-1/2}`, labels
/// uniform on `[-C, C]`.
pub fn load_theory_dataset(spec: &DatasetSpec, q: usize, rng: &mut Rng) -> Result<TheoryDataset> {
    let shape = [spec.d_hat, spec.height, spec.width];
    let len = shape.iter().product::<usize>();
    let raw = (0..spec.n)
        .map(|_| Tensor::from_vec(&shape, (0..len).map(|_| rng.sample(StandardNormal)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let y = (0..spec.n)
        .map(|_| rng.random_range(-spec.label_bound..=spec.label_bound))
        .collect();
    let normalized = normalize_dataset(&raw, q)?;
    Ok(TheoryDataset {
        x: normalized.samples,
        y,
    })
}

/// Class `k` is an elongated Gaussian blob whose orientation is `k % 2` and
/// whose colour mix is `k / 2`, placed at a random position with pixel noise.
fn render_blob(spec: &DatasetSpec, class: usize, rng: &mut Rng) -> Tensor {
    let (h, w, c) = (spec.height, spec.width, spec.d_hat);
    let horizontal = class.is_multiple_of(2);
    let colour = class / 2;
    let palettes = spec.num_classes.div_ceil(2);
    let cy = rng.random_range(1.5..h as f64 - 2.5);
    let cx = rng.random_range(1.5..w as f64 - 2.5);
    let (sy, sx) = if horizontal { (0.7, 2.2) } else { (2.2, 0.7) };
    let amp = rng.random_range(0.8..1.2);
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        // Colour mixes rotate a raised cosine around the channels.
        let phase = 2.0 * std::f64::consts::PI * (ch as f64 / c as f64 + colour as f64 / palettes as f64);
        let gain = 0.5 + 0.5 * phase.cos();
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) / sy;
                let dx = (x as f64 - cx) / sx;
                let noise: f64 = rng.sample(StandardNormal);
                data[(ch * h + y) * w + x] = amp * gain * (-(dy * dy + dx * dx) / 2.0).exp() + spec.noise * noise;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], data).expect("shape matches data")
}

fn synthetic_images(spec: &DatasetSpec, count: usize, rng: &mut Rng) -> ImageSet {
    let labels: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
    let x = labels.iter().map(|&k| render_blob(spec, k, rng)).collect();
    ImageSet { x, labels }
}

/// A parsed IDX array: big-endian dims followed by unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX file shorter than its magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::Format(format!(
            "bad IDX magic {:02x} {:02x} {:02x} {:02x}; only unsigned-byte arrays are supported",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let rank = bytes[3] as usize;
    if rank == 0 || bytes.len() < 4 + 4 * rank {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|k| u32::from_be_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize)
        .collect();
    let body = &bytes[4 + 4 * rank..];
    let expected: usize = dims.iter().product();
    if body.len() != expected {
        return Err(Error::Format(format!(
            "IDX body has {} bytes, header promises {expected}",
            body.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn idx_pair(spec: &DatasetSpec, images: &Path, labels: &Path, limit: usize) -> Result<ImageSet> {
    let img = parse_idx(&read(images)?)?;
    let lab = parse_idx(&read(labels)?)?;
    if img.dims.len() != 3 || lab.dims.len() != 1 {
        return Err(Error::Format(
            "expected a rank-3 image array and rank-1 label array".into(),
        ));
    }
    if img.dims[1] != spec.height || img.dims[2] != spec.width || spec.d_hat != 1 {
        return Err(Error::Config(format!(
            "IDX images are {}x{} with 1 channel; dataset declares {}x{}x{}",
            img.dims[1], img.dims[2], spec.d_hat, spec.height, spec.width
        )));
    }
    if img.dims[0] != lab.dims[0] {
        return Err(Error::Config(format!(
            "{} images but {} labels",
            img.dims[0], lab.dims[0]
        )));
    }
    let count = img.dims[0].min(limit);
    let px = spec.height * spec.width;
    let mut set = ImageSet::default();
    for i in 0..count {
        let label = lab.data[i] as usize;
        if label >= spec.num_classes {
            return Err(Error::Config(format!(
                "label {label} outside {} classes",
                spec.num_classes
            )));
        }
        let v = img.data[i * px..(i + 1) * px]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        set.x.push(Tensor::from_vec(&[1, spec.height, spec.width], v)?);
        set.labels.push(label);
    }
    Ok(set)
}

/// Rows of `label, v_0, ..., v_{c*h*w-1}`, no header.
fn csv_table(spec: &DatasetSpec, path: &Path, limit: usize) -> Result<ImageSet> {
    let len = spec.d_hat * spec.height * spec.width;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut set = ImageSet::default();
    for (line, rec) in reader.records().enumerate() {
        if set.len() == limit {
            break;
        }
        let rec = rec.map_err(|e| Error::Parse {
            line: line + 1,
            message: e.to_string(),
        })?;
        if rec.len() != len + 1 {
            return Err(Error::Config(format!(
                "{} line {}: {} fields, expected {}",
                path.display(),
                line + 1,
                rec.len(),
                len + 1
            )));
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line + 1,
                message: format!("{s:?}: {e}"),
            })
        };
        let label = parse(&rec[0])?;
        if label < 0.0 || label.fract() != 0.0 || label as usize >= spec.num_classes {
            return Err(Error::Config(format!("line {}: bad label {label}", line + 1)));
        }
        let v = rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
        set.x.push(Tensor::from_vec(&[spec.d_hat, spec.height, spec.width], v)?);
        set.labels.push(label as usize);
    }
    Ok(set)
}

fn unit_scale(set: &mut ImageSet) -> Result<()> {
    for (i, x) in set.x.iter_mut().enumerate() {
        let n = x.frobenius();
        if n == 0.0 {
            return Err(Error::DegenerateInput(format!("sample {i} has zero norm")));
        }
        *x = x.scale(1.0 / n);
    }
    Ok(())
}

/// Train and test splits for the image pipeline. Synthetic data is drawn from
/// fixed streams of `seed`.
pub fn load_image_dataset(spec: &DatasetSpec, seed: u64) -> Result<(ImageSet, ImageSet)> {
    spec.validate()?;
    let (mut train, mut test) = match spec.source {
        DatasetSource::SyntheticImages => (
            synthetic_images(spec, spec.n, &mut rng::stream(seed, domain::DATA, 0, 0)),
            synthetic_images(spec, spec.n_test, &mut rng::stream(seed, domain::TEST_DATA, 0, 0)),
        ),
        DatasetSource::IdxFiles => {
            let train = idx_pair(
                spec,
                spec.train_images.as_deref().expect("validated"),
                spec.train_labels.as_deref().expect("validated"),
                spec.n,
            )?;
            let test = match (&spec.test_images, &spec.test_labels) {
                (Some(i), Some(l)) => idx_pair(spec, i, l, spec.n_test)?,
                _ => ImageSet::default(),
            };
            (train, test)
        }
        DatasetSource::CsvFile => {
            let train = csv_table(spec, spec.csv_train.as_deref().expect("validated"), spec.n)?;
            let test = match &spec.csv_test {
                Some(p) => csv_table(spec, p, spec.n_test)?,
                None => ImageSet::default(),
            };
            (train, test)
        }
        DatasetSource::SyntheticTheory => {
            return Err(Error::Config(
                "synthetic_theory data cannot feed the image pipeline".into(),
            ))
        }
    };
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if spec.normalize {
        unit_scale(&mut train)?;
        unit_scale(&mut test)?;
    }
    Ok((train, test))
}
