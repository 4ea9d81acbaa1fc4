//! Labelled datasets: IDX and CSV ingestion plus synthetic generators.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim, invalid, Error, Result};
use crate::linalg::{all_finite, norm2};
use crate::registry::Registry;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const NORM_SLACK: f64 = 1e-9;

/// Inputs in the closed unit ball with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(dim(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            let d = first.len();
            for (i, x) in inputs.iter().enumerate() {
                if x.len() != d {
                    return Err(dim(format!(
                        "row {i} has length {} (expected {d})",
                        x.len()
                    )));
                }
                if !all_finite(x) {
                    return Err(invalid(format!("row {i} has non-finite entries")));
                }
                if norm2(x) > 1.0 + NORM_SLACK {
                    return Err(invalid(format!("row {i} lies outside the unit ball")));
                }
            }
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> (&[f64], usize) {
        (&self.inputs[i], self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.inputs
            .iter()
            .zip(&self.labels)
            .map(|(x, &y)| (x.as_slice(), y))
    }

    /// Rows `range`, keeping the class count.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let end = range.end.min(self.len());
        let start = range.start.min(end);
        Self {
            inputs: self.inputs[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn take(&self, n: usize) -> Self {
        self.slice(0..n)
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Self> {
        if self.labels.iter().any(|&y| y >= num_classes) {
            return Err(invalid("a label exceeds the requested class count"));
        }
        self.num_classes = num_classes;
        Ok(self)
    }

    /// Writes `label,x_1,...,x_d` rows without a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (x, y) in self.iter() {
            let mut rec = Vec::with_capacity(x.len() + 1);
            rec.push(y.to_string());
            rec.extend(x.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scales `x` onto the unit sphere when it lies outside the unit ball.
pub fn project_to_unit_ball(x: &mut [f64]) {
    let n = norm2(x);
    if n > 1.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Parse {
            line: p.line() as usize,
            column: 0,
            message: e.to_string(),
        },
        None => Error::Io(std::io::Error::other(e)),
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what}: header cut short")))
}

fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * d {
        return Err(Error::Truncated(format!(
            "images: header promises {n} images of {d} pixels, file holds {} bytes",
            body.len()
        )));
    }
    Ok((n, d, body))
}

fn parse_idx_labels(bytes: &[u8]) -> Result<(usize, &[u8])> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!(
            "labels: header promises {n} labels, file holds {}",
            body.len()
        )));
    }
    Ok((n, body))
}

/// Loads an IDX image/label pair (optionally gzip-compressed).
///
/// Pixels are scaled to `[0, 1]` and each image is then projected onto the
/// unit ball.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    limit: Option<usize>,
) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images.as_ref())?;
    let lbl_bytes = read_maybe_gz(labels.as_ref())?;
    let (n_img, d, pixels) = parse_idx_images(&img_bytes)?;
    let (n_lbl, raw_labels) = parse_idx_labels(&lbl_bytes)?;
    if n_img != n_lbl {
        return Err(dim(format!("{n_img} images but {n_lbl} labels")));
    }
    let n = limit.map_or(n_img, |l| l.min(n_img));
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let mut x: Vec<f64> = pixels[i * d..(i + 1) * d]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect();
        project_to_unit_ball(&mut x);
        inputs.push(x);
    }
    let labels: Vec<usize> = raw_labels[..n].iter().map(|&y| usize::from(y)).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(inputs, labels, classes)
}

/// Reads `label,x_1,...,x_d` rows. A non-numeric first row is taken as a
/// header. Rows outside the unit ball are projected onto it.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(i + 1, |p| p.line() as usize);
        let Some(first) = rec.get(0) else { continue };
        let label = match first.parse::<usize>() {
            Ok(y) => y,
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Parse {
                    line,
                    column: 1,
                    message: format!("label `{first}` is not a non-negative integer"),
                })
            }
        };
        let mut x = Vec::with_capacity(rec.len().saturating_sub(1));
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                column: j + 1,
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    column: j + 1,
                    message: "non-finite feature".into(),
                });
            }
            x.push(v);
        }
        project_to_unit_ball(&mut x);
        inputs.push(x);
        labels.push(label);
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(inputs, labels, classes)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
}

pub trait Generator: Send + Sync {
    fn generate(&self, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Dataset>;
}

/// Gaussian clusters around random centres, rescaled into the unit ball.
pub struct Blobs {
    pub spread: f64,
    pub noise: f64,
}

impl Default for Blobs {
    fn default() -> Self {
        Self {
            spread: 4.0,
            noise: 0.35,
        }
    }
}

impl Generator for Blobs {
    fn generate(&self, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let centers: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| {
                (0..spec.dim)
                    .map(|_| self.spread * unit.sample(rng))
                    .collect()
            })
            .collect();
        let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
        let mut inputs: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| {
                centers[y]
                    .iter()
                    .map(|c| c + self.noise * unit.sample(rng))
                    .collect()
            })
            .collect();
        let max = inputs.iter().map(|x| norm2(x)).fold(0.0, f64::max);
        if max > 0.0 {
            for x in &mut inputs {
                x.iter_mut().for_each(|v| *v /= max);
            }
        }
        shuffled(inputs, labels, spec.classes, rng)
    }
}

/// Interleaved planar spiral arms, one per class.
pub struct Spiral {
    pub turns: f64,
    pub noise: f64,
}

impl Default for Spiral {
    fn default() -> Self {
        Self {
            turns: 0.75,
            noise: 0.02,
        }
    }
}

impl Generator for Spiral {
    fn generate(&self, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        if spec.dim != 2 {
            return Err(invalid("spiral data is two-dimensional"));
        }
        let per_class = spec.n.div_ceil(spec.classes).max(1);
        let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
        let mut inputs = Vec::with_capacity(spec.n);
        for (i, &y) in labels.iter().enumerate() {
            let t = ((i / spec.classes) as f64 + 0.5) / per_class as f64;
            let angle = 2.0 * PI * (y as f64 / spec.classes as f64 + self.turns * t);
            let r = 0.05 + 0.9 * t;
            let mut x = vec![
                r * angle.cos() + self.noise * rng.gen_range(-1.0..1.0),
                r * angle.sin() + self.noise * rng.gen_range(-1.0..1.0),
            ];
            project_to_unit_ball(&mut x);
            inputs.push(x);
        }
        shuffled(inputs, labels, spec.classes, rng)
    }
}

fn shuffled(
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(rng);
    let xs = order.iter().map(|&i| inputs[i].clone()).collect();
    let ys = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(xs, ys, classes)
}

pub fn generators() -> Registry<dyn Generator> {
    let mut r: Registry<dyn Generator> = Registry::new("generator");
    r.register("blobs", Arc::new(Blobs::default()));
    r.register("spiral", Arc::new(Spiral::default()));
    r
}

pub fn synth_data(kind: &str, spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(invalid("synthetic data needs at least two classes"));
    }
    if spec.dim == 0 {
        return Err(invalid("synthetic data needs a positive dimension"));
    }
    let g = generators().get(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    g.generate(spec, &mut rng)
}
