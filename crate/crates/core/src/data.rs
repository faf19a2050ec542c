//! Seeded synthetic tasks and an IDX (MNIST) reader.
//!
//! Every dataset lives in the `[0, 1]` feature range so attack clipping
//! matches image conventions.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw two-moons coordinates are mapped by `p / 4 + MOONS_OFFSET`.
const MOONS_SCALE: f64 = 0.25;
const MOONS_OFFSET: [f64; 2] = [0.375, 0.4375];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub seed: u64,
    /// Minimum inter-class L∞ distance of the noise-free construction.
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub feature_range: (f64, f64),
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize, meta: DatasetMeta) -> Result<Self> {
        if x.shape()[0] != y.len() {
            return Err(Error::InvalidDataset(format!(
                "{} inputs but {} labels",
                x.shape()[0],
                y.len()
            )));
        }
        if let Some(&l) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidDataset("features outside [0, 1]".into()));
        }
        Ok(Self {
            x,
            y,
            classes,
            feature_range: (0.0, 1.0),
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Shape of a single sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            x: self.x.slice_rows(0, n),
            y: self.y[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Seeded shuffle of sample order.
    pub fn shuffled_indices(&self, rng: &mut rng::Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.y {
            c[l] += 1;
        }
        c
    }

    /// Averages non-overlapping `factor × factor` windows of image data.
    pub fn avg_pool(&self, factor: usize) -> Result<Dataset> {
        let s = self.x.shape();
        if s.len() != 4 || factor == 0 || !s[2].is_multiple_of(factor) || !s[3].is_multiple_of(factor) {
            return Err(Error::InvalidDataset(format!("cannot pool shape {s:?} by {factor}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2] / factor, s[3] / factor);
        let src = self.x.data();
        let mut out = vec![0.0; n * c * h * w];
        let norm = (factor * factor) as f64;
        for b in 0..n * c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for di in 0..factor {
                        for dj in 0..factor {
                            acc += src[(b * s[2] + i * factor + di) * s[3] + j * factor + dj];
                        }
                    }
                    out[(b * h + i) * w + j] = acc / norm;
                }
            }
        }
        Ok(Dataset {
            x: Tensor::new(vec![n, c, h, w], out)?,
            ..self.clone()
        })
    }

    /// Writes rows `f0,…,f{d-1},label` with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d: usize = self.sample_shape().iter().product();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, &label) in self.x.data().chunks(d).zip(&self.y) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn moon_point(class: usize, t: f64) -> [f64; 2] {
    let raw = if class == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    };
    [
        raw[0] * MOONS_SCALE + MOONS_OFFSET[0],
        raw[1] * MOONS_SCALE + MOONS_OFFSET[1],
    ]
}

/// Minimum L∞ distance between the two noise-free moon arcs (in the
/// rescaled coordinates): dense scan of the parameter square followed by
/// coordinate refinement around the best pair.
pub fn two_moons_margin() -> f64 {
    let dist = |s: f64, t: f64| {
        let (a, b) = (moon_point(0, s), moon_point(1, t));
        (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
    };
    let clamp = |v: f64| v.clamp(0.0, std::f64::consts::PI);
    let m = 600;
    let h = std::f64::consts::PI / m as f64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=m {
        for j in 0..=m {
            let (s, t) = (i as f64 * h, j as f64 * h);
            let d = dist(s, t);
            if d < best.0 {
                best = (d, s, t);
            }
        }
    }
    let (mut d, mut s, mut t) = best;
    let mut step = h;
    while step > 1e-13 {
        let mut moved = false;
        for (ds, dt) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let (s2, t2) = (clamp(s + ds), clamp(t + dt));
            let d2 = dist(s2, t2);
            if d2 < d {
                (d, s, t, moved) = (d2, s2, t2, true);
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    d
}

/// Interleaved half circles; class 0 is the upper arc. Points are evenly
/// spaced in angle, Gaussian noise is added in raw coordinates, and the
/// result is mapped into `[0, 1]²` by a uniform scale (then clipped).
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::InvalidDataset(format!("two_moons needs a positive even n, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidDataset(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let gauss = Normal::new(0.0, noise * MOONS_SCALE).expect("noise is finite and non-negative");
    let half = n / 2;
    let mut x = Vec::with_capacity(n * 2);
    let mut y = Vec::with_capacity(n);
    for class in 0..2 {
        for i in 0..half {
            let t = if half == 1 {
                0.0
            } else {
                std::f64::consts::PI * i as f64 / (half - 1) as f64
            };
            let p = moon_point(class, t);
            for v in p {
                let jitter = if noise > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
                x.push((v + jitter).clamp(0.0, 1.0));
            }
            y.push(class);
        }
    }
    let meta = DatasetMeta {
        name: "two_moons".into(),
        seed,
        margin: Some(two_moons_margin()),
    };
    Dataset::new(Tensor::new(vec![n, 2], x)?, y, 2, meta)
}

/// Isotropic Gaussian clusters, one class per center, labels assigned
/// round-robin. The recorded margin is `min_{i≠j} ‖c_i − c_j‖∞ − 6σ`.
pub fn gaussian_blobs(n: usize, centers: &[Vec<f64>], sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || centers.is_empty() {
        return Err(Error::InvalidDataset("gaussian_blobs needs n > 0 and at least one center".into()));
    }
    let d = centers[0].len();
    if d == 0 || centers.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidDataset("centers must share a positive dimension".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidDataset(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let gauss = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let k = centers.len();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for &m in &centers[c] {
            let jitter = if sigma > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
            x.push((m + jitter).clamp(0.0, 1.0));
        }
        y.push(c);
    }
    let mut min_center = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let dist = centers[i]
                .iter()
                .zip(&centers[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            min_center = min_center.min(dist);
        }
    }
    let meta = DatasetMeta {
        name: "gaussian_blobs".into(),
        seed,
        margin: min_center.is_finite().then_some(min_center - 6.0 * sigma),
    };
    Dataset::new(Tensor::new(vec![n, d], x)?, y, k, meta)
}

/// Uniform points labelled by which side of a hyperplane they fall on,
/// with a dead zone of half-width `margin` left empty.
pub fn separable_halfspace(n: usize, dim: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || dim == 0 || !(0.0..0.5).contains(&margin) {
        return Err(Error::InvalidDataset("separable_halfspace needs n, dim > 0 and 0 <= margin < 0.5".into()));
    }
    let mut rng = rng::stream(seed, Stream::Data);
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    while y.len() < n {
        let p: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let s = p[0] - 0.5;
        if s.abs() < margin {
            continue;
        }
        y.push((s > 0.0) as usize);
        x.extend(p);
    }
    let meta = DatasetMeta {
        name: "halfspace".into(),
        seed,
        margin: Some(2.0 * margin),
    };
    Dataset::new(Tensor::new(vec![n, dim], x)?, y, 2, meta)
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    let s = bytes.get(at..at + 4).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        expected: at + 4,
        actual: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([s[0], s[1], s[2], s[3]]))
}

/// Parses IDX images (`[N, rows, cols]` of `u8`) into `[N, 1, rows, cols]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            actual: magic,
        });
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let rows = read_be_u32(bytes, 8, path)? as usize;
    let cols = read_be_u32(bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            actual: magic,
        });
    }
    let n = read_be_u32(bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair. Pixels are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| Error::Read {
            path: p.to_path_buf(),
            source,
        })
    };
    let images = parse_idx_images(&read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read(labels_path)?, labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::CountMismatch {
            images: images.shape()[0],
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let meta = DatasetMeta {
        name: "idx".into(),
        seed: 0,
        margin: None,
    };
    Dataset::new(images, labels, classes, meta)
}

/// Encodes images (`rows × cols` bytes each) in IDX format.
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
