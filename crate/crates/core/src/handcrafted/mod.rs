//! Classical feature baselines: GSC (512-d), HOG (1764-d), and raw pixels
//! (4096-d).

mod gsc;
mod hog;

pub use gsc::gsc_features;
pub use hog::hog_features;

use crate::corpus::SampleRef;
use crate::error::{Error, Result};
use crate::imageops::ProcessedImage;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const GSC_DIM: usize = 512;
pub const HOG_DIM: usize = 1764;
pub const RAW_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureMethod {
    Gsc,
    Hog,
    Raw,
    Ssl(String),
}

impl FeatureMethod {
    /// Required dimension, or `None` when the method does not fix one.
    pub fn fixed_dim(&self) -> Option<usize> {
        match self {
            FeatureMethod::Gsc => Some(GSC_DIM),
            FeatureMethod::Hog => Some(HOG_DIM),
            FeatureMethod::Raw => Some(RAW_DIM),
            FeatureMethod::Ssl(_) => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gsc" => Ok(FeatureMethod::Gsc),
            "hog" => Ok(FeatureMethod::Hog),
            "raw" => Ok(FeatureMethod::Raw),
            other => match other.strip_prefix("ssl:") {
                Some(id) if !id.is_empty() => Ok(FeatureMethod::Ssl(id.to_string())),
                _ => Err(Error::InvalidArgument(format!("unknown feature method `{s}`"))),
            },
        }
    }
}

impl fmt::Display for FeatureMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMethod::Gsc => write!(f, "gsc"),
            FeatureMethod::Hog => write!(f, "hog"),
            FeatureMethod::Raw => write!(f, "raw"),
            FeatureMethod::Ssl(id) => write!(f, "ssl:{id}"),
        }
    }
}

/// A fixed-length feature vector tied to the sample it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    method: FeatureMethod,
    sample_ref: SampleRef,
}

impl Embedding {
    pub fn new(values: Vec<f64>, method: FeatureMethod, sample_ref: SampleRef) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("embedding must be non-empty".into()));
        }
        if let Some(want) = method.fixed_dim() {
            if values.len() != want {
                return Err(Error::InvalidArgument(format!(
                    "{method} embeddings must have dim {want}, got {}",
                    values.len()
                )));
            }
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "embedding contains non-finite value {bad}"
            )));
        }
        Ok(Self { values, method, sample_ref })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn method(&self) -> &FeatureMethod {
        &self.method
    }

    pub fn sample_ref(&self) -> SampleRef {
        self.sample_ref
    }
}

/// Row-major flatten of a 64x64 grayscale image.
pub fn raw_pixel_features(image: &ProcessedImage, sample_ref: SampleRef) -> Result<Embedding> {
    if image.channels() != 1 || image.side() != 64 {
        return Err(Error::ShapeMismatch(format!(
            "raw pixel features need 1x64x64 input, got {}x{}x{}",
            image.channels(),
            image.side(),
            image.side()
        )));
    }
    let values: Vec<f64> = image.pixels().iter().copied().collect();
    Embedding::new(values, FeatureMethod::Raw, sample_ref)
}

pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

/// Write embeddings as CSV: a version comment, a header, then one row per
/// sample with space-separated values in the last column.
pub fn write_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "# handver embeddings format {EMBEDDING_FORMAT_VERSION}").map_err(io)?;
    writeln!(w, "writer_id,sample_index,method,dim,values").map_err(io)?;
    for e in embeddings {
        let joined: Vec<String> = e.values.iter().map(|v| format!("{v}")).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            e.sample_ref.writer_id,
            e.sample_ref.sample_index,
            e.method,
            e.dim(),
            joined.join(" ")
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |reason: String| Error::BadManifest { path: path.to_path_buf(), reason };
    let version_line = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| bad("empty embeddings file".into()))?;
    let expected = format!("# handver embeddings format {EMBEDDING_FORMAT_VERSION}");
    if version_line.trim() != expected {
        return Err(bad(format!("unsupported embeddings header `{version_line}`")));
    }
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| bad("missing column header".into()))?;
    if header.trim() != "writer_id,sample_index,method,dim,values" {
        return Err(bad(format!("unexpected column header `{header}`")));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(5, ',');
        let mut field = |name: &str| {
            parts
                .next()
                .ok_or_else(|| bad(format!("row {lineno}: missing {name}")))
        };
        let writer_id: u32 = field("writer_id")?
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {lineno}: bad writer_id")))?;
        let sample_index: u32 = field("sample_index")?
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {lineno}: bad sample_index")))?;
        let method = FeatureMethod::parse(field("method")?.trim())?;
        let dim: usize = field("dim")?
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {lineno}: bad dim")))?;
        let values: Vec<f64> = field("values")?
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("row {lineno}: bad value")))?;
        if values.len() != dim {
            return Err(bad(format!(
                "row {lineno}: dim says {dim} but {} values present",
                values.len()
            )));
        }
        out.push(Embedding::new(
            values,
            method,
            SampleRef { writer_id, sample_index },
        )?);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::imageops::{binarize, resize_pad, ProcessedImage};

    pub fn synth_processed(seed: u64, writer: u32, sample: u32) -> ProcessedImage {
        let (raw, _) = crate::corpus::synth::render_sample(seed, writer, sample, 64);
        resize_pad(&raw, 64).unwrap()
    }

    pub fn synth_binary(seed: u64, writer: u32, sample: u32) -> ProcessedImage {
        binarize(&synth_processed(seed, writer, sample)).image
    }
}
