//! Datasets: two-arm spirals, MNIST IDX files, one-hot targets and the
//! encodings of inputs into delay histories.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::delay::DelayHistory;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub n_features: usize,
    pub n_classes: usize,
    /// Row-major `K x n_features`.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    /// Row-major one-hot `K x n_classes`.
    pub targets: Vec<f64>,
    /// Image shape for image datasets.
    pub image_shape: Option<(usize, usize)>,
}

impl LabeledDataset {
    pub fn new(n_features: usize, n_classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if n_features == 0 || inputs.len() != labels.len() * n_features {
            return Err(Error::Shape {
                context: "LabeledDataset inputs",
                expected: labels.len() * n_features,
                actual: inputs.len(),
            });
        }
        let mut targets = Vec::with_capacity(labels.len() * n_classes);
        for &l in &labels {
            targets.extend(one_hot(l, n_classes)?);
        }
        Ok(Self {
            n_features,
            n_classes,
            inputs,
            labels,
            targets,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn input(&self, k: usize) -> &[f64] {
        &self.inputs[k * self.n_features..(k + 1) * self.n_features]
    }

    #[inline]
    pub fn target(&self, k: usize) -> &[f64] {
        &self.targets[k * self.n_classes..(k + 1) * self.n_classes]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Config(format!("sample index {k} out of range ({})", self.len())));
            }
            inputs.extend_from_slice(self.input(k));
            labels.push(self.labels[k]);
        }
        let mut out = Self::new(self.n_features, self.n_classes, inputs, labels)?;
        out.image_shape = self.image_shape;
        Ok(out)
    }

    /// First `n` samples (or all if fewer).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

pub fn one_hot(label: usize, n_classes: usize) -> Result<Vec<f64>> {
    if label >= n_classes {
        return Err(Error::Config(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }
    let mut v = vec![0.0; n_classes];
    v[label] = 1.0;
    Ok(v)
}

/// Construction parameters for the two-arm spiral set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpiralSpec {
    pub count_per_class: usize,
    pub noise_sd: f64,
    pub turns: f64,
}

impl Default for SpiralSpec {
    fn default() -> Self {
        Self {
            count_per_class: 500,
            noise_sd: 0.025,
            turns: 1.5,
        }
    }
}

/// Noise-free point at angle `theta` on the arm of `class` (0 or 1).
pub fn spiral_point(theta: f64, class: usize, turns: f64) -> [f64; 2] {
    let span = turns * 2.0 * PI;
    let rho = 0.1 + 0.8 * theta / span;
    let phase = theta + class as f64 * PI;
    [rho * phase.cos(), rho * phase.sin()]
}

/// Balanced two-class spiral set; samples are interleaved 0, 1, 0, 1, ...
pub fn generate_spirals(spec: SpiralSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.count_per_class == 0 {
        return Err(Error::Config("count_per_class must be at least 1".into()));
    }
    if !(spec.noise_sd >= 0.0) || !(spec.turns > 0.0) {
        return Err(Error::Config(format!(
            "invalid spiral parameters: noise_sd = {}, turns = {}",
            spec.noise_sd, spec.turns
        )));
    }
    let mut rng = SeededRng::new(seed);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let span = spec.turns * 2.0 * PI;
    let mut inputs = Vec::with_capacity(4 * spec.count_per_class);
    let mut labels = Vec::with_capacity(2 * spec.count_per_class);
    for _ in 0..spec.count_per_class {
        for class in 0..2 {
            let theta = rng.random_range(0.0..=span);
            let [x, y] = spiral_point(theta, class, spec.turns);
            inputs.push(x + noise.sample(&mut rng));
            inputs.push(y + noise.sample(&mut rng));
            labels.push(class);
        }
    }
    LabeledDataset::new(2, 2, inputs, labels)
}

pub fn write_spirals_csv(data: &LabeledDataset, mut w: impl Write) -> Result<()> {
    if data.n_features != 2 {
        return Err(Error::Config("spiral CSV needs two features".into()));
    }
    writeln!(w, "x1,x2,label")?;
    for k in 0..data.len() {
        let x = data.input(k);
        writeln!(w, "{},{},{}", x[0], x[1], data.labels[k])?;
    }
    Ok(())
}

pub fn read_spirals_csv(r: impl BufRead) -> Result<LabeledDataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let here = offset;
        offset += line.len() + 1;
        if n == 0 {
            if line.trim() != "x1,x2,label" {
                return Err(Error::Parse {
                    offset: here,
                    message: format!("expected header 'x1,x2,label', got '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::Parse {
            offset: here,
            message: format!("line {}: {what}", n + 1),
        };
        if fields.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        inputs.push(fields[0].parse::<f64>().map_err(|_| bad("bad x1"))?);
        inputs.push(fields[1].parse::<f64>().map_err(|_| bad("bad x2"))?);
        labels.push(fields[2].parse::<usize>().map_err(|_| bad("bad label"))?);
    }
    LabeledDataset::new(2, 2, inputs, labels)
}

/// Raw IDX image tensor (`u8`, `count x rows x cols`).
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            message: "truncated header".into(),
        })
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let magic = read_u32_be(bytes, 0)?;
        if magic != IDX_IMAGES_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
            });
        }
        let count = read_u32_be(bytes, 4)? as usize;
        let rows = read_u32_be(bytes, 8)? as usize;
        let cols = read_u32_be(bytes, 12)? as usize;
        let need = count * rows * cols;
        let body = &bytes[16..];
        if body.len() != need {
            return Err(Error::Parse {
                offset: 16 + body.len().min(need),
                message: format!("image payload has {} bytes, header implies {need}", body.len()),
            });
        }
        Ok(Self {
            count,
            rows,
            cols,
            pixels: body.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IDX_IMAGES_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Parse {
            offset: 8 + body.len().min(count),
            message: format!("label payload has {} bytes, header implies {count}", body.len()),
        });
    }
    Ok(body.to_vec())
}

pub fn labels_to_idx_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Pixels scaled to `[0, 1]`, ten one-hot classes.
pub fn mnist_from_idx(images: &IdxImages, labels: &[u8]) -> Result<LabeledDataset> {
    if images.count != labels.len() {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{} images but {} labels", images.count, labels.len()),
        });
    }
    let inputs = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels = labels.iter().map(|&l| l as usize).collect();
    let mut ds = LabeledDataset::new(images.rows * images.cols, MNIST_CLASSES, inputs, labels)?;
    ds.image_shape = Some((images.rows, images.cols));
    Ok(ds)
}

/// Inverse of [`mnist_from_idx`] (pixels are rounded back to bytes).
pub fn mnist_to_idx(data: &LabeledDataset) -> Result<(IdxImages, Vec<u8>)> {
    let (rows, cols) = data
        .image_shape
        .ok_or_else(|| Error::Config("dataset has no image shape".into()))?;
    let pixels = data.inputs.iter().map(|v| (v * 255.0).round() as u8).collect();
    let labels = data.labels.iter().map(|&l| l as u8).collect();
    Ok((
        IdxImages {
            count: data.len(),
            rows,
            cols,
            pixels,
        },
        labels,
    ))
}

pub fn load_mnist_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let images = IdxImages::parse(&std::fs::read(image_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(label_path)?)?;
    mnist_from_idx(&images, &labels)
}

/// Two-point input: `xi = x1` on `[-tau, -tau/2)`, `xi = x2` on
/// `[-tau/2, 0]`, `eta = 0`.
pub fn encode_spiral_input(x: &[f64], m_tau: usize) -> Result<DelayHistory> {
    if x.len() != 2 {
        return Err(Error::Shape {
            context: "encode_spiral_input",
            expected: 2,
            actual: x.len(),
        });
    }
    if m_tau == 0 || !m_tau.is_multiple_of(2) {
        return Err(Error::Config(format!("spiral encoding needs an even m_tau, got {m_tau}")));
    }
    let mut samples = Vec::with_capacity(2 * (m_tau + 1));
    for j in 0..=m_tau {
        samples.push(if j < m_tau / 2 { x[0] } else { x[1] });
        samples.push(0.0);
    }
    Ok(DelayHistory {
        dim: 2,
        m_tau,
        samples,
    })
}

/// Nearest-neighbour 2x enlargement (each pixel becomes a 2x2 block).
pub fn enlarge_nearest(image: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if image.len() != rows * cols {
        return Err(Error::Shape {
            context: "enlarge_nearest",
            expected: rows * cols,
            actual: image.len(),
        });
    }
    let mut out = Vec::with_capacity(4 * image.len());
    for r in 0..2 * rows {
        let src = &image[(r / 2) * cols..(r / 2 + 1) * cols];
        for c in 0..2 * cols {
            out.push(src[c / 2]);
        }
    }
    Ok(out)
}

/// Image input: enlarge 2x, flatten row-major, and tile cyclically over the
/// `m_tau + 1` history samples of `xi` (the last repetition is truncated).
pub fn encode_image_input(image: &[f64], rows: usize, cols: usize, m_tau: usize) -> Result<DelayHistory> {
    let big = enlarge_nearest(image, rows, cols)?;
    if m_tau < big.len() {
        return Err(Error::Config(format!(
            "m_tau = {m_tau} is shorter than the enlarged image ({} values)",
            big.len()
        )));
    }
    let mut samples = Vec::with_capacity(2 * (m_tau + 1));
    for j in 0..=m_tau {
        samples.push(big[j % big.len()]);
        samples.push(0.0);
    }
    Ok(DelayHistory {
        dim: 2,
        m_tau,
        samples,
    })
}
