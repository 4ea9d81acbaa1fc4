use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Network};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    dims: Vec<usize>,
    layers: Vec<LayerFile>,
    classifier: ClassifierFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierFile {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

impl From<&Network> for ModelFile {
    fn from(net: &Network) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dims: net.dims(),
            layers: net
                .layers()
                .iter()
                .map(|l| LayerFile {
                    rows: l.weights.rows(),
                    cols: l.weights.cols(),
                    weights: l.weights.as_slice().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
            classifier: ClassifierFile {
                rows: net.classifier().rows(),
                cols: net.classifier().cols(),
                weights: net.classifier().as_slice().to_vec(),
            },
        }
    }
}

impl TryFrom<ModelFile> for Network {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.format_version != FORMAT_VERSION {
            return Err(schema(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                f.format_version
            )));
        }
        if f.dims.len() != f.layers.len() + 2 {
            return Err(schema(format!(
                "dims has {} entries for {} layers",
                f.dims.len(),
                f.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(f.layers.len());
        for (k, l) in f.layers.into_iter().enumerate() {
            if l.rows != f.dims[k + 1] || l.cols != f.dims[k] {
                return Err(schema(format!(
                    "layer {} is {}x{} but dims say {}x{}",
                    k + 1,
                    l.rows,
                    l.cols,
                    f.dims[k + 1],
                    f.dims[k]
                )));
            }
            let w = DenseMatrix::new(l.rows, l.cols, l.weights)
                .map_err(|e| schema(format!("layer {}: {e}", k + 1)))?;
            layers.push(
                LayerWeights::new(w, l.bias)
                    .map_err(|e| schema(format!("layer {}: {e}", k + 1)))?,
            );
        }
        let c = f.classifier;
        let n = f.dims.len();
        if c.rows != f.dims[n - 1] || c.cols != f.dims[n - 2] {
            return Err(schema(format!(
                "classifier is {}x{} but dims say {}x{}",
                c.rows,
                c.cols,
                f.dims[n - 1],
                f.dims[n - 2]
            )));
        }
        let a = DenseMatrix::new(c.rows, c.cols, c.weights)
            .map_err(|e| schema(format!("classifier: {e}")))?;
        Network::new(layers, a).map_err(|e| schema(e.to_string()))
    }
}

pub fn write_model<W: Write>(net: &Network, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    serde_json::to_writer(&mut w, &ModelFile::from(net))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(reader: R) -> Result<Network> {
    let file: ModelFile = serde_json::from_reader(BufReader::new(reader)).map_err(|e| {
        if e.is_io() {
            Error::Io(std::io::Error::other(e))
        } else {
            Error::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            }
        }
    })?;
    Network::try_from(file)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    write_model(net, File::create(path)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    read_model(File::open(path)?)
}
