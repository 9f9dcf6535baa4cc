//! Dataset ingestion: IDX image files (plain or gzip), synthetic
//! generators, and schema-driven tabular CSV with one-hot encoding and
//! min-max scaling fitted on the training partition only.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{derive_seed, sha256_hex};
use flate2::read::GzDecoder;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Immutable labeled sample collection. Features are [n, ...sample shape].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Per-feature (min, max) observed across the set.
    pub feature_range: Vec<(f64, f64)>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, provenance: impl Into<String>) -> Result<Self> {
        let n = *features
            .shape()
            .first()
            .ok_or_else(|| Error::InvalidShape("dataset features need a batch axis".into()))?;
        if n != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{n} samples but {} labels",
                labels.len()
            )));
        }
        let feature_range = per_feature_range(&features);
        Ok(Dataset { features, labels, feature_range, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> Result<Tensor> {
        self.features.row(i)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// New dataset from a list of indices (may repeat or reorder).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let rows: Result<Vec<Tensor>> = indices.iter().map(|&i| self.sample(i)).collect();
        let features = Tensor::stack(&rows?)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels, self.provenance.clone())
    }

    /// Features reshaped per-sample, e.g. [n,28,28] viewed as [n,1,28,28]
    /// when a model declares a channel axis.
    pub fn features_as(&self, per_sample: &[usize]) -> Result<Tensor> {
        let n = self.len();
        let want: usize = per_sample.iter().product();
        let have = self.features.numel() / n;
        if want != have {
            return Err(Error::ShapeMismatch {
                expected: per_sample.to_vec(),
                got: self.feature_shape().to_vec(),
            });
        }
        let mut shape = vec![n];
        shape.extend_from_slice(per_sample);
        self.features.clone().reshape(shape)
    }

    /// Stable content hash embedded in calibration artifacts.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.features.numel() * 8 + self.labels.len() * 8);
        for v in self.features.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            bytes.extend_from_slice(&(l as u64).to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

fn per_feature_range(features: &Tensor) -> Vec<(f64, f64)> {
    let n = features.shape()[0];
    let d = features.numel() / n;
    let mut range = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for i in 0..n {
        let row = &features.data()[i * d..(i + 1) * d];
        for (r, &v) in range.iter_mut().zip(row) {
            r.0 = r.0.min(v);
            r.1 = r.1.max(v);
        }
    }
    range
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("slice of 4")))
        .ok_or_else(|| Error::Format { field: field.into(), message: "file truncated".into() })
}

/// Parses an IDX image/label file pair. Pixels are scaled to [0,1] by /255.
/// Gzip-compressed files are accepted transparently.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let lab = read_maybe_gz(labels_path)?;

    let magic = be_u32(&img, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            field: "image magic".into(),
            message: format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n = be_u32(&img, 4, "image count")? as usize;
    let rows = be_u32(&img, 8, "image rows")? as usize;
    let cols = be_u32(&img, 12, "image cols")? as usize;
    let payload = &img[16..];
    if payload.len() != n * rows * cols {
        return Err(Error::Format {
            field: "image payload".into(),
            message: format!("expected {} bytes, found {}", n * rows * cols, payload.len()),
        });
    }

    let lmagic = be_u32(&lab, 0, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            field: "label magic".into(),
            message: format!("expected {IDX_LABELS_MAGIC:#010x}, found {lmagic:#010x}"),
        });
    }
    let ln = be_u32(&lab, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::Format {
            field: "label count".into(),
            message: format!("{n} images but {ln} labels"),
        });
    }
    let lpayload = &lab[8..];
    if lpayload.len() != ln {
        return Err(Error::Format {
            field: "label payload".into(),
            message: format!("expected {ln} bytes, found {}", lpayload.len()),
        });
    }

    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    let features = Tensor::new(vec![n, rows, cols], data)?;
    let labels = lpayload.iter().map(|&b| b as usize).collect();
    Dataset::new(features, labels, format!("idx:{}", images_path.display()))
}

/// Writes a dataset of [n, rows, cols] images in IDX format (u8 pixels,
/// values quantized by round(v*255)). Used for fixtures and synthetic
/// corpora so the binary loader path is exercised end to end.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = ds.features.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidShape(format!(
            "write_idx expects [n, rows, cols] features, got {shape:?}"
        )));
    }
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in ds.features.data() {
        img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        lab.push(l as u8);
    }
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}

/// Gaussian class clusters with controllable separation; deterministic by
/// seed. Separation 0 collapses every class onto the same center.
pub fn synth_blobs(
    classes: usize,
    dims: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("synth_blobs needs at least 2 classes".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "blobs-centers"));
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dims).map(|_| separation * normal.sample(&mut rng)).collect())
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "blobs-samples"));
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for d in 0..dims {
            data.push(centers[class][d] + normal.sample(&mut rng));
        }
        labels.push(class);
    }
    let features = Tensor::new(vec![n, dims], data)?;
    Dataset::new(features, labels, format!("blobs:c{classes}d{dims}s{separation}"))
}

/// Seeded 28x28 grayscale digit corpus: each class is a fixed stroke
/// skeleton randomized by rotation, scale, shift, thickness and pixel
/// noise, then quantized to 8 bits so pixel values match u8/255 exactly.
pub fn synth_digits(n: usize, seed: u64) -> Result<Dataset> {
    const SIDE: usize = 28;
    let base = derive_seed(seed, "digits");
    let mut data = vec![0.0; n * SIDE * SIDE];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class);
        let mut rng = ChaCha12Rng::seed_from_u64(base.wrapping_add(splitmix(i as u64)));
        render_digit(class, &mut rng, &mut data[i * SIDE * SIDE..(i + 1) * SIDE * SIDE], SIDE);
    }
    let features = Tensor::new(vec![n, SIDE, SIDE], data)?;
    Dataset::new(features, labels, format!("digits:n{n}"))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

type Segment = ((f64, f64), (f64, f64));

fn ring(cx: f64, cy: f64, rx: f64, ry: f64, sides: usize) -> Vec<Segment> {
    let mut segs = Vec::with_capacity(sides);
    for i in 0..sides {
        let a0 = std::f64::consts::TAU * i as f64 / sides as f64;
        let a1 = std::f64::consts::TAU * (i + 1) as f64 / sides as f64;
        segs.push((
            (cx + rx * a0.cos(), cy + ry * a0.sin()),
            (cx + rx * a1.cos(), cy + ry * a1.sin()),
        ));
    }
    segs
}

fn poly(points: &[(f64, f64)]) -> Vec<Segment> {
    points.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Two or three handwriting-style skeleton variants per class; vertex
/// jitter downstream blurs the boundary between look-alike classes the way
/// real handwriting does (4/9, 3/5, 7/1).
fn glyph_segments(class: usize, variant: usize) -> Vec<Segment> {
    match (class, variant % 3) {
        (0, 0) => ring(0.5, 0.5, 0.27, 0.4, 12),
        (0, 1) => ring(0.5, 0.5, 0.33, 0.38, 12),
        (0, _) => {
            let mut s = ring(0.5, 0.5, 0.24, 0.41, 12);
            s.extend(poly(&[(0.42, 0.62), (0.6, 0.4)]));
            s
        }
        (1, 0) => {
            let mut s = poly(&[(0.36, 0.26), (0.56, 0.08), (0.56, 0.92)]);
            s.extend(poly(&[(0.4, 0.92), (0.72, 0.92)]));
            s
        }
        (1, 1) => poly(&[(0.5, 0.08), (0.5, 0.92)]),
        (1, _) => poly(&[(0.42, 0.2), (0.54, 0.08), (0.5, 0.92)]),
        (2, 0) => poly(&[
            (0.22, 0.28),
            (0.34, 0.1),
            (0.66, 0.1),
            (0.78, 0.3),
            (0.7, 0.5),
            (0.22, 0.9),
            (0.8, 0.9),
        ]),
        (2, 1) => poly(&[
            (0.25, 0.22),
            (0.45, 0.08),
            (0.7, 0.14),
            (0.74, 0.36),
            (0.5, 0.6),
            (0.26, 0.88),
            (0.52, 0.82),
            (0.78, 0.86),
        ]),
        (2, _) => poly(&[
            (0.24, 0.3),
            (0.38, 0.12),
            (0.64, 0.12),
            (0.74, 0.32),
            (0.3, 0.86),
            (0.78, 0.9),
        ]),
        (3, 0) => poly(&[
            (0.24, 0.12),
            (0.72, 0.12),
            (0.48, 0.45),
            (0.76, 0.6),
            (0.7, 0.86),
            (0.24, 0.9),
        ]),
        (3, 1) => poly(&[
            (0.28, 0.18),
            (0.56, 0.08),
            (0.72, 0.22),
            (0.5, 0.44),
            (0.74, 0.62),
            (0.6, 0.88),
            (0.26, 0.86),
        ]),
        (3, _) => poly(&[
            (0.26, 0.1),
            (0.74, 0.14),
            (0.44, 0.46),
            (0.72, 0.56),
            (0.74, 0.8),
            (0.3, 0.92),
        ]),
        (4, 0) => {
            let mut s = poly(&[(0.62, 0.06), (0.2, 0.62), (0.84, 0.62)]);
            s.extend(poly(&[(0.64, 0.3), (0.64, 0.94)]));
            s
        }
        (4, 1) => {
            let mut s = poly(&[(0.3, 0.1), (0.26, 0.52), (0.8, 0.52)]);
            s.extend(poly(&[(0.66, 0.1), (0.66, 0.92)]));
            s
        }
        (4, _) => {
            let mut s = poly(&[(0.56, 0.08), (0.24, 0.56), (0.82, 0.56)]);
            s.extend(poly(&[(0.6, 0.34), (0.68, 0.92)]));
            s
        }
        (5, 0) => poly(&[
            (0.76, 0.1),
            (0.26, 0.1),
            (0.24, 0.46),
            (0.6, 0.46),
            (0.74, 0.64),
            (0.62, 0.88),
            (0.24, 0.84),
        ]),
        (5, 1) => poly(&[
            (0.72, 0.14),
            (0.3, 0.1),
            (0.32, 0.4),
            (0.64, 0.42),
            (0.76, 0.66),
            (0.56, 0.9),
            (0.26, 0.8),
        ]),
        (5, _) => poly(&[
            (0.78, 0.08),
            (0.3, 0.12),
            (0.26, 0.5),
            (0.56, 0.44),
            (0.72, 0.6),
            (0.66, 0.86),
            (0.28, 0.88),
        ]),
        (6, 0) => {
            let mut s = poly(&[(0.68, 0.08), (0.4, 0.34), (0.28, 0.62)]);
            s.extend(ring(0.5, 0.7, 0.22, 0.2, 10));
            s
        }
        (6, 1) => {
            let mut s = poly(&[(0.62, 0.1), (0.36, 0.4), (0.3, 0.68)]);
            s.extend(ring(0.52, 0.72, 0.2, 0.18, 10));
            s
        }
        (6, _) => {
            let mut s = poly(&[(0.72, 0.12), (0.42, 0.3), (0.28, 0.58)]);
            s.extend(ring(0.48, 0.68, 0.21, 0.22, 10));
            s
        }
        (7, 0) => poly(&[(0.2, 0.1), (0.8, 0.1), (0.38, 0.92)]),
        (7, 1) => {
            let mut s = poly(&[(0.22, 0.14), (0.78, 0.1), (0.42, 0.9)]);
            s.extend(poly(&[(0.34, 0.5), (0.66, 0.5)]));
            s
        }
        (7, _) => poly(&[(0.24, 0.08), (0.76, 0.14), (0.5, 0.5), (0.36, 0.92)]),
        (8, 0) => {
            let mut s = ring(0.5, 0.3, 0.2, 0.19, 10);
            s.extend(ring(0.5, 0.72, 0.24, 0.21, 10));
            s
        }
        (8, 1) => {
            let mut s = ring(0.52, 0.28, 0.17, 0.17, 10);
            s.extend(ring(0.48, 0.7, 0.22, 0.23, 10));
            s
        }
        (8, _) => {
            let mut s = ring(0.46, 0.3, 0.21, 0.18, 10);
            s.extend(ring(0.54, 0.72, 0.2, 0.2, 10));
            s
        }
        (_, 0) => {
            let mut s = ring(0.48, 0.3, 0.22, 0.2, 10);
            s.extend(poly(&[(0.7, 0.34), (0.58, 0.92)]));
            s
        }
        (_, 1) => {
            let mut s = ring(0.5, 0.32, 0.2, 0.22, 10);
            s.extend(poly(&[(0.68, 0.4), (0.66, 0.7), (0.5, 0.92)]));
            s
        }
        (_, _) => {
            let mut s = ring(0.46, 0.28, 0.19, 0.19, 10);
            s.extend(poly(&[(0.64, 0.32), (0.6, 0.92)]));
            s
        }
    }
}

fn dist_to_segment(p: (f64, f64), s: &Segment) -> f64 {
    let (a, b) = (s.0, s.1);
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 { ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = (a.0 + t * ab.0, a.1 + t * ab.1);
    ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
}

fn render_digit(class: usize, rng: &mut ChaCha12Rng, pixels: &mut [f64], side: usize) {
    let variant = rng.gen_range(0..3usize);
    let mut segments = glyph_segments(class, variant);
    // Most samples are cleanly written; a sloppy minority carries the
    // near-boundary mass that makes small attack budgets meaningful.
    let sloppy = rng.gen_bool(0.2);

    // Vertex jitter: shared endpoints must move together, so jitter is a
    // deterministic hash of the (quantized) vertex position.
    let jitter_seed: u64 = rng.gen();
    let jitter_amp: f64 = if sloppy {
        rng.gen_range(0.04..0.09)
    } else {
        rng.gen_range(0.008..0.03)
    };
    let mut jitter = |p: (f64, f64)| -> (f64, f64) {
        let qx = (p.0 * 1e6).round() as i64 as u64;
        let qy = (p.1 * 1e6).round() as i64 as u64;
        let h = splitmix(jitter_seed ^ qx.wrapping_mul(0x9e37_79b9).wrapping_add(qy));
        let ux = (h & 0xffff_ffff) as f64 / u32::MAX as f64 - 0.5;
        let uy = (h >> 32) as f64 / u32::MAX as f64 - 0.5;
        (p.0 + 2.0 * jitter_amp * ux, p.1 + 2.0 * jitter_amp * uy)
    };
    for s in &mut segments {
        *s = (jitter(s.0), jitter(s.1));
    }

    let theta: f64 = rng.gen_range(-0.25..0.25);
    let scale: f64 = rng.gen_range(0.8..1.15);
    let shear: f64 = rng.gen_range(-0.2..0.2);
    let dx: f64 = rng.gen_range(-0.09..0.09);
    let dy: f64 = rng.gen_range(-0.09..0.09);
    let thickness: f64 = rng.gen_range(0.04..0.085);
    let seg_thickness: Vec<f64> = segments
        .iter()
        .map(|_| thickness * rng.gen_range(0.85..1.2))
        .collect();
    let intensity: f64 = if sloppy { rng.gen_range(0.35..0.75) } else { rng.gen_range(0.7..1.0) };
    let edge_width: f64 = rng.gen_range(0.5..1.0);
    let noise_sigma = if sloppy { rng.gen_range(0.05..0.1) } else { rng.gen_range(0.02..0.05) };
    let noise = Normal::new(0.0, noise_sigma).expect("valid normal");
    let (sin, cos) = theta.sin_cos();

    for py in 0..side {
        for px in 0..side {
            // Map the pixel center back into glyph space (inverse of the
            // rotate/shear/scale/translate chain).
            let u = (px as f64 + 0.5) / side as f64 - 0.5 - dx;
            let v = (py as f64 + 0.5) / side as f64 - 0.5 - dy;
            let ru = cos * u + sin * v;
            let rv = -sin * u + cos * v;
            let gx = (ru - shear * rv) / scale + 0.5;
            let gy = rv / scale + 0.5;
            let mut stroke = 0.0f64;
            for (s, &t) in segments.iter().zip(&seg_thickness) {
                let d = dist_to_segment((gx, gy), s);
                let cover = ((t - d) / (edge_width * t) + 1.0).clamp(0.0, 1.0);
                stroke = stroke.max(cover);
            }
            let value = intensity * stroke + noise.sample(rng);
            // Quantize like an 8-bit capture so pixels are exactly k/255.
            pixels[py * side + px] = (value.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
}

/// Column roles for a tabular CSV, plus the optional label collapse map
/// (e.g. every attack-traffic label onto 1, normal traffic onto 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularSchema {
    pub numeric: Vec<String>,
    pub categorical: Vec<String>,
    pub label: String,
    #[serde(default)]
    pub label_collapse: Option<BTreeMap<String, usize>>,
}

/// Category values seen when a vocabulary was fitted; test-time loads reuse
/// it so the one-hot layout stays aligned.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CategoryVocab {
    /// Per categorical column (schema order): sorted distinct values.
    pub values: Vec<Vec<String>>,
}

#[derive(Debug)]
pub struct TabularLoad {
    pub dataset: Dataset,
    pub vocab: CategoryVocab,
    /// Count of test-time category values absent from the vocabulary;
    /// such cells one-hot to all zeros instead of erroring.
    pub unseen_categories: usize,
}

/// Loads a CSV with a header row: categoricals one-hot, numerics raw (scale
/// afterwards with stats fitted on the training partition), labels via the
/// collapse map or sorted distinct values. Pass a vocabulary to align
/// encodings with a previously loaded file.
pub fn load_tabular(
    csv_path: &Path,
    schema: &TabularSchema,
    vocab: Option<&CategoryVocab>,
) -> Result<TabularLoad> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("schema column {name:?} not in CSV header")))
    };
    let numeric_idx: Vec<usize> = schema.numeric.iter().map(|c| col_index(c)).collect::<Result<_>>()?;
    let categorical_idx: Vec<usize> =
        schema.categorical.iter().map(|c| col_index(c)).collect::<Result<_>>()?;
    let label_idx = col_index(&schema.label)?;

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for rec in reader.records() {
        rows.push(rec.map_err(|e| Error::Csv(e.to_string()))?);
    }

    // Vocabulary: reuse the provided one or fit from this file.
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let mut values = Vec::with_capacity(categorical_idx.len());
            for &ci in &categorical_idx {
                let mut seen: Vec<String> = rows
                    .iter()
                    .map(|r| r.get(ci).unwrap_or("").to_string())
                    .collect();
                seen.sort();
                seen.dedup();
                values.push(seen);
            }
            CategoryVocab { values }
        }
    };
    if vocab.values.len() != categorical_idx.len() {
        return Err(Error::Config(format!(
            "vocabulary covers {} categorical columns, schema has {}",
            vocab.values.len(),
            categorical_idx.len()
        )));
    }

    let sorted_labels: Vec<String> = if schema.label_collapse.is_none() {
        let mut ls: Vec<String> = rows
            .iter()
            .map(|r| r.get(label_idx).unwrap_or("").to_string())
            .collect();
        ls.sort();
        ls.dedup();
        ls
    } else {
        Vec::new()
    };

    let onehot_width: usize = vocab.values.iter().map(|v| v.len()).sum();
    let width = numeric_idx.len() + onehot_width;
    let mut data = Vec::with_capacity(rows.len() * width);
    let mut labels = Vec::with_capacity(rows.len());
    let mut unseen = 0usize;

    for (ri, rec) in rows.iter().enumerate() {
        for (k, &ci) in numeric_idx.iter().enumerate() {
            let cell = rec.get(ci).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::Format {
                field: format!("row {ri} column {:?}", schema.numeric[k]),
                message: format!("unparseable numeric cell {cell:?}"),
            })?;
            data.push(v);
        }
        for (k, &ci) in categorical_idx.iter().enumerate() {
            let cell = rec.get(ci).unwrap_or("");
            let vals = &vocab.values[k];
            let pos = vals.iter().position(|v| v == cell);
            if pos.is_none() {
                unseen += 1;
            }
            for j in 0..vals.len() {
                data.push(if pos == Some(j) { 1.0 } else { 0.0 });
            }
        }
        let raw = rec.get(label_idx).unwrap_or("");
        let label = match &schema.label_collapse {
            Some(map) => map.get(raw).copied().ok_or_else(|| Error::Format {
                field: format!("label row {ri}"),
                message: format!("value {raw:?} missing from collapse map"),
            })?,
            None => sorted_labels.iter().position(|v| v == raw).expect("label seen during scan"),
        };
        labels.push(label);
    }

    let features = Tensor::new(vec![rows.len(), width], data)?;
    let dataset = Dataset::new(features, labels, format!("csv:{}", csv_path.display()))?;
    Ok(TabularLoad { dataset, vocab, unseen_categories: unseen })
}

/// Per-column min/max fitted on one dataset (the training partition).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinMaxStats {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

pub fn fit_min_max(train: &Dataset) -> MinMaxStats {
    let (mins, maxs) = train.feature_range.iter().cloned().unzip();
    MinMaxStats { mins, maxs }
}

/// Scales every feature column to [0,1] with the supplied stats, clamping
/// values that fall outside the fitted range. Zero-range columns scale to
/// constant 0 (min-max is undefined there).
pub fn apply_min_max(ds: &Dataset, stats: &MinMaxStats) -> Result<Dataset> {
    let n = ds.len();
    let d = ds.features.numel() / n;
    if stats.mins.len() != d {
        return Err(Error::InvalidArgument(format!(
            "stats cover {} columns, dataset has {d}",
            stats.mins.len()
        )));
    }
    let mut data = Vec::with_capacity(ds.features.numel());
    for i in 0..n {
        let row = &ds.features.data()[i * d..(i + 1) * d];
        for j in 0..d {
            let span = stats.maxs[j] - stats.mins[j];
            let v = if span > 0.0 { ((row[j] - stats.mins[j]) / span).clamp(0.0, 1.0) } else { 0.0 };
            data.push(v);
        }
    }
    let features = Tensor::new(ds.features.shape().to_vec(), data)?;
    Dataset::new(features, ds.labels.clone(), format!("{}|minmax", ds.provenance))
}

/// Deterministic stratified split into (train, calibrate, holdout, test).
/// Per-class proportions hold within one sample and no index lands in two
/// partitions, which keeps the calibration pool disjoint from the attack
/// evaluation pool by construction.
pub fn split(ds: &Dataset, fractions: [f64; 4], seed: u64) -> Result<[Dataset; 4]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "split"));
    let mut parts: [Vec<usize>; 4] = Default::default();
    for indices in by_class.values() {
        let mut idx = indices.clone();
        idx.shuffle(&mut rng);
        let n = idx.len();
        // Largest-remainder allocation keeps counts within one sample of
        // exact proportions.
        let mut counts = [0usize; 4];
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(4);
        let mut assigned = 0;
        for (p, &f) in fractions.iter().enumerate() {
            let exact = f * n as f64;
            counts[p] = exact.floor() as usize;
            assigned += counts[p];
            remainders.push((p, exact - exact.floor()));
        }
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..(n - assigned) {
            counts[remainders[k % 4].0] += 1;
        }
        let mut cursor = 0;
        for (p, &c) in counts.iter().enumerate() {
            parts[p].extend_from_slice(&idx[cursor..cursor + c]);
            cursor += c;
        }
    }
    for (p, &f) in fractions.iter().enumerate() {
        if f > 0.0 && parts[p].is_empty() {
            return Err(Error::InsufficientSamples(format!(
                "partition {p} with fraction {f} received no samples"
            )));
        }
        if f == 0.0 && !parts[p].is_empty() {
            return Err(Error::InvalidArgument(format!(
                "partition {p} with zero fraction received samples"
            )));
        }
    }
    let build = |idx: &Vec<usize>| -> Result<Option<Dataset>> {
        if idx.is_empty() {
            return Ok(None);
        }
        ds.subset(idx).map(Some)
    };
    let empty = || {
        Dataset::new(
            Tensor::zeros(&std::iter::once(1).chain(ds.feature_shape().iter().copied()).collect::<Vec<_>>()),
            vec![0],
            format!("{}|empty", ds.provenance),
        )
    };
    Ok([
        build(&parts[0])?.map_or_else(empty, Ok)?,
        build(&parts[1])?.map_or_else(empty, Ok)?,
        build(&parts[2])?.map_or_else(empty, Ok)?,
        build(&parts[3])?.map_or_else(empty, Ok)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn idx_round_trips_and_scales() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let pixels: Vec<f64> = (0..2 * 28 * 28).map(|i| (i % 256) as f64 / 255.0).collect();
        let ds = Dataset::new(
            Tensor::new(vec![2, 28, 28], pixels).unwrap(),
            vec![3, 7],
            "fixture",
        )
        .unwrap();
        write_idx(&ds, &img, &lab).unwrap();
        let back = load_idx(&img, &lab).unwrap();
        assert_eq!(back.features.shape(), &[2, 28, 28]);
        assert_eq!(back.labels, vec![3, 7]);
        assert!(back.features.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // u8 quantization makes the round trip exact.
        assert_eq!(back.features.data(), ds.features.data());
    }

    #[test]
    fn idx_bad_magic_names_the_field() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let mut bytes = 0x0000_0802u32.to_be_bytes().to_vec();
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.push(0);
        std::fs::write(&img, &bytes).unwrap();
        std::fs::write(&lab, [0u8; 9]).unwrap();
        match load_idx(&img, &lab) {
            Err(Error::Format { field, .. }) => assert!(field.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_payload_detected() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 7]); // needs 8
        std::fs::write(&img, &bytes).unwrap();
        let mut lbytes = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[0u8; 2]);
        std::fs::write(&lab, &lbytes).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Format { .. })));
    }

    #[test]
    fn gzip_idx_loads_transparently() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        use std::io::Write;
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx.gz");
        let lab = dir.path().join("lab.idx");
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 128, 255, 64]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).unwrap();
        std::fs::write(&img, enc.finish().unwrap()).unwrap();
        let mut lbytes = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        lbytes.extend_from_slice(&1u32.to_be_bytes());
        lbytes.push(5);
        std::fs::write(&lab, &lbytes).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.labels, vec![5]);
        assert_eq!(ds.features.data()[2], 1.0);
    }

    #[test]
    fn blobs_are_seed_deterministic() {
        let a = synth_blobs(3, 4, 60, 2.0, 9).unwrap();
        let b = synth_blobs(3, 4, 60, 2.0, 9).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.labels, b.labels);
        let c = synth_blobs(3, 4, 60, 2.0, 10).unwrap();
        assert_ne!(a.features.data(), c.features.data());
    }

    #[test]
    fn digits_are_quantized_and_balanced() {
        let ds = synth_digits(40, 7).unwrap();
        assert_eq!(ds.features.shape(), &[40, 28, 28]);
        for &v in ds.features.data() {
            let q = (v * 255.0).round() / 255.0;
            assert_eq!(v, q);
        }
        for c in 0..10 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 4);
        }
    }

    #[test]
    fn split_partitions_are_disjoint_and_stratified() {
        let ds = synth_blobs(2, 3, 100, 1.0, 4).unwrap();
        let parts = split(&ds, [0.5, 0.2, 0.2, 0.1], 11).unwrap();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        assert_eq!(total, 100);
        // Stratification: per-class proportions within one sample.
        for p in &parts {
            let c0 = p.labels.iter().filter(|&&l| l == 0).count() as i64;
            let c1 = p.labels.iter().filter(|&&l| l == 1).count() as i64;
            assert!((c0 - c1).abs() <= 1, "{c0} vs {c1}");
        }
        // Same seed reproduces the exact assignment.
        let again = split(&ds, [0.5, 0.2, 0.2, 0.1], 11).unwrap();
        for (a, b) in parts.iter().zip(&again) {
            assert_eq!(a.features.data(), b.features.data());
        }
        // All in train.
        let all = split(&ds, [1.0, 0.0, 0.0, 0.0], 11).unwrap();
        assert_eq!(all[0].len(), 100);
    }

    #[test]
    fn tabular_pipeline_scales_from_train_only() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "f1,kind,label\n0,a,normal\n5,b,attack\n10,a,attack\n").unwrap();
        let mut collapse = BTreeMap::new();
        collapse.insert("normal".to_string(), 0);
        collapse.insert("attack".to_string(), 1);
        let schema = TabularSchema {
            numeric: vec!["f1".into()],
            categorical: vec!["kind".into()],
            label: "label".into(),
            label_collapse: Some(collapse),
        };
        let loaded = load_tabular(&path, &schema, None).unwrap();
        assert_eq!(loaded.dataset.labels, vec![0, 1, 1]);
        assert_eq!(loaded.unseen_categories, 0);
        // one numeric + two one-hot columns
        assert_eq!(loaded.dataset.feature_shape(), &[3]);
        let stats = fit_min_max(&loaded.dataset);
        let scaled = apply_min_max(&loaded.dataset, &stats).unwrap();
        let d = scaled.features.data();
        assert_eq!(&d[0..3], &[0.0, 1.0, 0.0]); // f1=0 scaled, one-hot a
        assert_eq!(d[3], 0.5); // f1=5
        assert_eq!(d[6], 1.0); // f1=10
    }

    #[test]
    fn tabular_unseen_category_maps_to_zeros() {
        let dir = tempdir().unwrap();
        let train = dir.path().join("train.csv");
        let test = dir.path().join("test.csv");
        std::fs::write(&train, "f,c,y\n1,a,x\n2,b,y\n").unwrap();
        std::fs::write(&test, "f,c,y\n3,zz,x\n").unwrap();
        let schema = TabularSchema {
            numeric: vec!["f".into()],
            categorical: vec!["c".into()],
            label: "y".into(),
            label_collapse: None,
        };
        let fit = load_tabular(&train, &schema, None).unwrap();
        let reuse = load_tabular(&test, &schema, Some(&fit.vocab)).unwrap();
        assert_eq!(reuse.unseen_categories, 1);
        assert_eq!(&reuse.dataset.features.data()[1..3], &[0.0, 0.0]);
    }

    #[test]
    fn tabular_unparseable_cell_reports_row_and_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "f,y\n1,x\noops,y\n").unwrap();
        let schema = TabularSchema {
            numeric: vec!["f".into()],
            categorical: vec![],
            label: "y".into(),
            label_collapse: None,
        };
        match load_tabular(&path, &schema, None) {
            Err(Error::Format { field, .. }) => {
                assert!(field.contains("row 1"), "{field}");
                assert!(field.contains('f'), "{field}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn constant_column_scales_to_zero() {
        let ds = Dataset::new(
            Tensor::new(vec![3, 2], vec![4.0, 1.0, 4.0, 2.0, 4.0, 3.0]).unwrap(),
            vec![0, 1, 0],
            "t",
        )
        .unwrap();
        let stats = fit_min_max(&ds);
        let scaled = apply_min_max(&ds, &stats).unwrap();
        assert!(scaled.features.data().iter().step_by(2).all(|&v| v == 0.0));
    }
}
